"""
Nearest neighbours under dynamic time warping
=============================================

Sessions are compared as sequences of active-index sets, with one minus the
Jaccard overlap as the per-step cost.
"""

import numpy as np

from seqfraud import synth
from seqfraud.dtw import DtwConfig, dtw_distance, knn_scores
from seqfraud.encoder import Encoder
from seqfraud.metrics import auc

cfg = synth.SynthConfig(n_sessions=400, fraud_rate=0.3, T=12, separation=0.8, seed=4)
sessions = synth.generate(cfg)
enc = Encoder.from_schema(synth.schema_for(cfg))
codes = np.stack([e.active for e in enc.encode(sessions)])
labels = np.array([s.label for s in sessions])

print("d(s0, s1) =", dtw_distance(codes[0], codes[1]))
print("with a band of 2:", dtw_distance(codes[0], codes[1], DtwConfig(window=2)))

_, frac = knn_scores(codes[300:], codes[:300], labels[:300], DtwConfig(k_neighbors=5))
print("kNN auc:", round(auc(frac, labels[300:]), 3))
