"""A few hundred optimizer steps on small scenes, then decode one scene."""

from pvt import tensor as T
from pvt.backbone import HEAD_STRIDE, decode_boxes
from pvt.model import target_grid
from pvt.scenes import generate_scene
from pvt.train import ExperimentConfig, evaluate, train

cfg = ExperimentConfig.from_mapping({
    "scene.extent": 4.0,
    "point.fc_channel": 16, "point.heads": 2,
    "backbone.tfm_channel": 16, "backbone.tfm_heads": 2,
    "backbone.mode": "single_scale", "backbone.single_scale_blocks": 2,
    "head.tfm_channel": 16, "head.tfm_heads": 2,
    "optim.steps": 300, "optim.batch": 4, "optim.warmup_steps": 30,
    "eval.scenes": 16, "log.every": 50,
})
result = train(cfg, print)
print("loss", round(result.report["initial_loss"], 3), "->", round(result.report["final_loss"], 3))
print("held-out AP:", evaluate(result.detector, cfg)["ap"])

det = result.detector
scene = generate_scene(cfg.scene_config(), seed=123)
with T.no_grad():
    out = det.forward(det.voxelize([scene]))
for cls, o in out.items():
    found = decode_boxes(o.heatmap.data[0], o.box_reg.data[0], target_grid(det.grid, HEAD_STRIDE[cls]), cls)
    truth = [b for b in scene.boxes if b.class_id == cls]
    print(f"class {cls}: {len(truth)} true, {len(found)} decoded")
    for box, score in found:
        print(f"   ({box.cx:+.2f}, {box.cy:+.2f}) {box.w:.2f}x{box.l:.2f} score {score:.2f}")
