"""FLOPs and parameter counts across the point-encoder space and a few voxel samples."""

from pvt.arch import enumerate_point_space, sample_voxel_specs
from pvt.flops import SceneShape, count_flops, total_params

shape = SceneShape(grid_extent=(64, 64), n_voxels=2048, cap_points=32, f=4, batch=1)

print(f"{'encoder':<34}{'GFLOPs':>9}{'params':>11}")
for spec in enumerate_point_space():
    if spec["point.type"] == "pvt":
        name = f"pvt {spec['point.depth']}"
    else:
        name = f"pointnet fc={spec['point.fc_channel']} depth={spec['point.pointnet_depth']}"
    print(f"{name:<34}{count_flops(spec, shape) / 1e9:>9.2f}{total_params(spec):>11,}")

print()
for i, spec in enumerate(sample_voxel_specs(5, seed=0)):
    blocks = spec.blocks_per_scale()
    print(f"voxel sample {i}: d={spec['backbone.tfm_channel']:<4} blocks={blocks}  "
          f"{count_flops(spec, shape) / 1e9:.1f} GFLOPs  {total_params(spec):,} params")
