"""End to end on a tiny corpus: both training stages, report generation, scoring.

About a minute of CPU; expect weak numbers at this size.
Run: python demos/03_tiny_pipeline.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from abnblip import pipeline
from abnblip.config import Config

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="abnblip-demo-"))
cfg = Config.load(overrides=["data.n=200", "train.stage1_epochs=5", "train.stage2_epochs=5"])

corpus = pipeline.gen_data(cfg, out / "data")
s1 = pipeline.run_stage1(cfg, corpus, out / "s1")
print("stage 1 best validation macro-AUC:", round(s1.summary["best_val_macro_auc"], 3))

s2 = pipeline.run_stage2(cfg, corpus, s1.checkpoint, out / "s2")
print("stage 2 in-batch retrieval on train:", round(s2.summary["train_retrieval"], 3))

reports = pipeline.run_generate(cfg, corpus, s1.checkpoint, s2.checkpoint, out / "gen")
first = sorted(p for p in reports.glob("*.txt") if not p.name.endswith(".findings.txt"))[0]
print(f"\n{first.name}:")
print("\n".join(first.read_text().splitlines()[:8]), "\n...")

metrics = pipeline.run_eval(cfg, corpus, reports, out / "eval")
for key in ("cls.macro.auc", "nlg.abn.bleu4", "nlg.abn.exact_match", "ce.f1"):
    print(f"{key:22s} {metrics[key]:.4f}")
print("\nartifacts in", out)
