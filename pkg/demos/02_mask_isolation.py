"""The three attention regimes of the querying transformer, shown by perturbation.

Run: python demos/02_mask_isolation.py
"""

import numpy as np

from abnblip.qformer import QFormer, QFormerConfig, build_attention_mask
from abnblip.synth import Vocabulary

rng = np.random.default_rng(0)
qf = QFormer(QFormerConfig(vocab_size=len(Vocabulary.closed())), rng)

# the multimodal-causal mask, shrunk to 3 queries and 4 text positions for display
m = build_attention_mask("multimodal-causal", 4, n_queries=3).allowed.astype(int)
print("rows attend to columns (first 3 are queries):")
print(m)

visual = rng.normal(size=(1, 5, 32))
ids = rng.integers(40, 90, size=(1, 8))
ids[0, 0] = 2  # [DEC]
q, t = (x.data for x in qf.joint_forward(ids, visual))

j = 5
ids2 = ids.copy()
ids2[0, j] = 41 if ids[0, j] != 41 else 42
q2, t2 = (x.data for x in qf.joint_forward(ids2, visual))
print(f"\nchanging text token {j}:")
print(f"  max change in query rows:          {np.abs(q2 - q).max():.2e}")
print(f"  max change at text positions < {j}: {np.abs(t2[:, :j] - t[:, :j]).max():.2e}")
print(f"  max change at text positions >= {j}: {np.abs(t2[:, j:] - t[:, j:]).max():.2e}")

# queries never see text in the unimodal regime, so their embeddings are text-free
z = qf.query_visual(visual).Z_proj.data
print(f"\nquery embeddings {z.shape}, row norms {np.linalg.norm(z, axis=-1).min():.12f}")
