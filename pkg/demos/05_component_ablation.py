"""
The four-cell component ablation
================================

Linear versus MLP projection head, with and without the occupancy task, on
the default dataset. Each cell pretrains from scratch, so this takes a while
(about a minute and a half per cell on one core). Results are cached under
``runs/demo-grid`` and the script can be re-run cheaply.
"""

from pathlib import Path

from xdistill.pipeline import TrainConfig, ablation_grid, seed_means, write_grid_csv
from xdistill.synthworld import DatasetConfig, generate_dataset

out = Path("runs/demo-grid")
out.mkdir(parents=True, exist_ok=True)
frames = list(generate_dataset(DatasetConfig()))
rows = ablation_grid(TrainConfig(), frames, table="5", seeds=(0,), cache_dir=out / "cells")
write_grid_csv(rows, out / "grid.csv")

print(f"{'cell':4s} {'head':12s} {'occ':5s} {'rank':>4s} {'RankMe':>7s} {'LP mIoU':>8s}")
for r in rows:
    print(f"{r['cell']:4s} {r['head']:12s} {str(r['occ']):5s} {r['rank']:>4d} {r['rankme']:7.3f} {r['lp_miou']:8.3f}")
print("\nmeans by cell:", {k: round(v, 3) for k, v in seed_means(rows, "lp_miou").items()})
