"""
Comparing the sequence models on synthetic sessions
===================================================

Fraudulent sessions follow a page chain that drifts towards a scripted cycle.
The mean-of-events MLP only sees page frequencies. The LSTM sees order, and
the transition-field CNN sees consecutive pairs directly.
"""

from seqfraud import models, synth
from seqfraud.encoder import Encoder, train_item_embeddings
from seqfraud.metrics import evaluate

cfg = synth.SynthConfig(n_sessions=1500, fraud_rate=0.2, T=30, separation=0.4, seed=11)
sessions = synth.generate(cfg)
train, test = sessions[:1200], sessions[1200:]

emb = train_item_embeddings(train, d_emb=8, epochs=2, seed=0)
enc = Encoder.from_schema(synth.schema_for(cfg), emb)
fit_set, valid = models.split_train_valid(train, 0.2, seed=0)

for kind in ("mlp", "rnn", "cnn_mtf", "fused"):
    mc = models.ModelConfig(kind=kind, lstm_layers=(16,), lr=0.03 if kind in ("mlp", "rnn") else 0.01,
                            epochs=8, batch_size=64, class_weights=(1.0, 4.0))
    model, log = models.train(mc, fit_set, valid, enc)
    scores = model.predict_proba(models.featurize(enc, test, kind))
    rep = evaluate(scores, [s.label for s in test])
    print(f"{kind:8s} auc {rep.auc:.3f}  ks {rep.ks:.3f}  best epoch auc {model.valid_auc:.3f}")

# the fused log tracks gradient norms per branch, both should stay non-zero
print({k: round(v, 4) for k, v in log[-1].grad_norms.items()})
