"""Point-to-voxel transformer encoders for a toy pillar 3D detector."""
