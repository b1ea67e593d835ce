"""A look at the synthetic corpus: labels, planted signatures and finding text.

Run: python demos/01_synthetic_corpus.py
"""

import numpy as np

from abnblip.synth import detokenize, make_corpus, preprocess_volume, signature_mask
from abnblip.taxonomy import NAMES, REGIONS, region_of

corpus = make_corpus(20, seed=0)
print(f"{len(corpus.cases)} cases, vocabulary of {len(corpus.vocab)} tokens")
print("split sizes:", {s: len(corpus.indices(s)) for s in ("train", "val", "test")})

case = corpus.cases[0]
print(f"\n{case.case_id}: volume {case.volume.shape} {case.volume.dtype}")
print("positive abnormalities:", [NAMES[k] for k in np.flatnonzero(case.labels)])

# every positive label plants a signature; its voxels stand out after windowing
vol = preprocess_volume(case.volume)
print(f"preprocessed range [{vol.min():.3f}, {vol.max():.3f}], background mean {np.median(vol):.3f}")

# findings are templates: severity words for positives, a fixed negation otherwise
for k in range(4):
    print(f"  [{REGIONS[region_of(k)]}] {detokenize(case.findings[k])}")

# the mask for one abnormality grows with severity
for sev in range(3):
    print(f"severity {sev}: signature covers {int(signature_mask(0, sev, case.volume.shape, (0, 0, 0)).sum())} voxels")
