"""
Distil, then measure what the backbone learned
==============================================

A short pretraining run on the default synthetic dataset, followed by the
label-free RankMe diagnostic and a linear probe against a random backbone.
Runs in under a minute on one core; raise ``epochs`` for the full desk setting.
"""

from dataclasses import replace

from xdistill.pipeline import TrainConfig, linear_probe, pretrain, random_backbone, rank_report_for, split_frames
from xdistill.synthworld import DatasetConfig, generate_dataset

frames = list(generate_dataset(DatasetConfig()))
cfg = replace(TrainConfig(), epochs=5, eval_every=0)

rec = pretrain(cfg, frames)
print(f"distillation loss {rec.initial_distill:.3f} -> {rec.final_distill:.3f} in {rec.steps} steps "
      f"({rec.wall_time:.0f} s)")
print(f"RankMe of the distilled backbone: {rec.rank_reports[-1]['rankme']:.2f}, "
      f"matrix rank {rec.rank_reports[-1]['numerical_rank']}")

rand = random_backbone(cfg)
val = split_frames(frames, "val")
print(f"RankMe of a random backbone:      {rank_report_for(rand, val, cfg.rankme_samples).rankme:.2f}")

lp = linear_probe(rec, frames, cfg=cfg)
lp0 = linear_probe((rand, cfg), frames)
print(f"linear probe mIoU: distilled {lp.miou:.3f}  random {lp0.miou:.3f}")
print("per-class IoU (distilled):", [round(x, 3) for x in lp.per_class_iou])
