import numpy as np
import pytest

from seqfraud import models, nn
from seqfraud.encoder import Encoder
from seqfraud.events import DatasetSchema, Domain, Event, Session
from seqfraud.gradcheck import numerical_gradient, relative_error
from seqfraud.metrics import auc
from seqfraud.models import (
    ConfigError,
    FeatureSet,
    FingerprintMismatch,
    ModelConfig,
    TrainedModel,
    TrainingDiverged,
    featurize,
    fit,
    forward_cnn_mtf,
    forward_fused,
    forward_mlp,
    forward_rnn,
    init_params,
    network_backward,
    network_forward,
)

TINY = dict(lstm_layers=(3, 2), conv_spec=((2, 3, 1, 2),), dense_spec=(3,), fusion_spec=(4,))


def tiny_model(kind, D=4, l=8, seed=0, **kw):
    cfg = ModelConfig(kind=kind, seed=seed, **{**TINY, **kw})
    return TrainedModel(cfg, init_params(cfg, D, l), "fp", D, l)


def randomize(params, rng, scale=0.5):
    for name, v in params.items():
        params[name] = rng.normal(size=v.shape) * scale


def features(rng, n=3, T=4, D=4, l=8):
    return FeatureSet(
        labels=rng.integers(0, 2, size=n),
        dense=rng.normal(size=(n, T, D)),
        fields=rng.random((n, l, l)),
        mean=rng.normal(size=(n, D)),
    )


# -- config -------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = ModelConfig(kind="fused", lstm_layers=(16, 8), conv_spec=((4, 3, 1, 2),), lr=0.02, class_weights=(1.0, 5.0))
    values = models.parse_key_values(cfg.dumps())
    assert models.config_from_dict(values) == cfg


def test_config_errors_name_key():
    with pytest.raises(ConfigError, match="^kind"):
        models.config_from_dict({"kind": "transformer"})
    with pytest.raises(ConfigError, match="^bogus"):
        models.config_from_dict({"kind": "rnn", "bogus": "1"})
    with pytest.raises(ConfigError, match="^epochs"):
        models.config_from_dict({"kind": "rnn", "epochs": "0"})


def test_incompatible_conv_spec():
    with pytest.raises(ConfigError, match="conv_spec"):
        init_params(ModelConfig(kind="cnn_mtf", conv_spec=((2, 9, 1, 2),)), 4, 8)


# -- forward contracts --------------------------------------------------------

def test_rnn_batch_independence(rng):
    m = tiny_model("rnn")
    randomize(m.params, rng)
    X = rng.normal(size=(2, 5, 4))
    both = forward_rnn(X, m)
    np.testing.assert_allclose(forward_rnn(X[:1], m)[0], both[0], rtol=0, atol=1e-14)
    X2 = X.copy()
    X2[1] = rng.normal(size=(5, 4)) * 10
    np.testing.assert_allclose(forward_rnn(X2, m)[0], both[0], rtol=0, atol=1e-14)


def test_zero_parameter_models_give_even_odds(rng):
    fs = features(rng)
    for kind in models.KINDS:
        m = tiny_model(kind)
        randomize(m.params, rng, 0.0)
        logits = network_forward(m.config, m.params, fs)[0]
        assert not logits.any()
        np.testing.assert_array_equal(m.predict_proba(fs), 0.5)


def test_cnn_zero_field_zero_logits(rng):
    m = tiny_model("cnn_mtf")
    out = forward_cnn_mtf(np.zeros((2, 8, 8)), m)
    assert out.shape == (2, 2) and not out.any()


def test_cnn_identical_transition_multisets(rng):
    schema = DatasetSchema((Domain("page", ("a", "b", "c")), Domain("act", ("x", "y"))), 8)
    enc = Encoder.from_schema(schema)

    def sess(pages, sid):
        ev = tuple(Event(i + 1, (("page", p), ("act", "x" if p == "a" else "y"))) for i, p in enumerate(pages))
        return Session(sid, ev, 0)

    # swap the non-adjacent repeated blocks "a b" and "a c"
    s1, s2 = sess("abacab", "1"), sess("acabab", "2")
    fs = featurize(enc, [s1, s2], "cnn_mtf")
    m = tiny_model("cnn_mtf", l=enc.width)
    randomize(m.params, rng)
    out = forward_cnn_mtf(fs.fields, m)
    assert out.shape == (2, 2)
    np.testing.assert_array_equal(out[0], out[1])


def test_fused_branch_ablation(rng):
    fs = features(rng)
    m = tiny_model("fused")
    randomize(m.params, rng)
    for name in m.params:
        if models.branch_of(name) == "cnn":
            m.params[name] = np.zeros_like(m.params[name])
    base = forward_fused(fs.dense, fs.fields, m)
    np.testing.assert_array_equal(forward_fused(fs.dense, rng.random(fs.fields.shape), m), base)

    m2 = tiny_model("fused")
    randomize(m2.params, rng)
    for name in m2.params:
        if models.branch_of(name) == "rnn":
            m2.params[name] = np.zeros_like(m2.params[name])
    base = forward_fused(fs.dense, fs.fields, m2)
    np.testing.assert_array_equal(forward_fused(rng.normal(size=fs.dense.shape), fs.fields, m2), base)


def test_fused_row_mismatch(rng):
    fs = features(rng)
    with pytest.raises(ValueError):
        forward_fused(fs.dense, fs.fields[:2], tiny_model("fused"))


def test_fused_degenerates_to_rnn(rng):
    fs = features(rng)
    fused = tiny_model("fused")
    randomize(fused.params, rng)
    n_cnn = TINY["dense_spec"][-1]
    W = fused.params["fuse.dense0.W"].copy()
    W[:n_cnn] = 0.0
    fused.params["fuse.dense0.W"] = W
    rnn = tiny_model("rnn", dense_spec=TINY["fusion_spec"])
    for name in rnn.params:
        src = name.replace("head.", "fuse.")
        if name == "head.dense0.W":
            rnn.params[name] = W[n_cnn:]
        else:
            rnn.params[name] = fused.params[src]
    np.testing.assert_allclose(forward_fused(fs.dense, fs.fields, fused), forward_rnn(fs.dense, rnn), rtol=0, atol=1e-14)


def test_mlp_composition_and_order_invariance(rng):
    m = tiny_model("mlp", dense_spec=(5,))
    randomize(m.params, rng)
    x = rng.normal(size=(3, 4))
    p = m.params
    manual = np.tanh(x @ p["head.dense0.W"] + p["head.dense0.b"]) @ p["out.W"] + p["out.b"]
    np.testing.assert_allclose(forward_mlp(x, m), manual, rtol=0, atol=1e-13)
    X = rng.normal(size=(2, 6, 4))
    perm = rng.permutation(6)
    np.testing.assert_allclose(forward_mlp(X, m), forward_mlp(X[:, perm], m), rtol=0, atol=1e-13)
    zero = tiny_model("mlp")
    for name in zero.params:
        if name.endswith(".b"):
            zero.params[name] = np.zeros_like(zero.params[name])
    assert not forward_mlp(np.zeros((2, 4)), zero).any()


def test_fingerprint_and_kind_checks(rng):
    m = tiny_model("rnn")
    with pytest.raises(FingerprintMismatch):
        forward_rnn(np.zeros((1, 2, 4)), m, fingerprint="other")
    forward_rnn(np.zeros((1, 2, 4)), m, fingerprint="fp")
    with pytest.raises(ConfigError):
        forward_cnn_mtf(np.zeros((1, 8, 8)), m)


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("kind", models.KINDS)
def test_end_to_end_gradients(rng, kind):
    fs = features(rng)
    m = tiny_model(kind)
    randomize(m.params, rng)

    def loss():
        logits = network_forward(m.config, m.params, fs)[0]
        return nn.softmax_xent(logits, fs.labels)[0]

    logits, cache = network_forward(m.config, m.params, fs)
    _, _, dlogits = nn.softmax_xent(logits, fs.labels)
    grads = network_backward(m.config, m.params, cache, dlogits)
    assert set(grads) == set(m.params)
    for name in m.params:
        assert relative_error(grads[name], numerical_gradient(loss, m.params[name])) < 1e-4, name


def test_fused_gradients_reach_both_branches(rng):
    fs = features(rng)
    m = tiny_model("fused")
    randomize(m.params, rng)
    logits, cache = network_forward(m.config, m.params, fs)
    _, _, dl = nn.softmax_xent(logits, fs.labels)
    grads = network_backward(m.config, m.params, cache, dl)
    for name in ("conv0.K", "lstm0.W"):
        assert np.abs(grads[name]).sum() > 0


# -- training -----------------------------------------------------------------

def separable(rng, n=80, D=4):
    labels = np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)]
    mean = rng.normal(size=(n, D))
    mean[:, 0] += np.where(labels == 1, 2.0, -2.0)
    return FeatureSet(labels=labels, mean=mean)


def test_single_batch_epoch_is_one_adagrad_step(rng):
    fs = separable(rng, n=20)
    cfg = ModelConfig(kind="mlp", dense_spec=(3,), epochs=1, batch_size=64, lr=0.05, seed=4)
    trained, log = fit(cfg, fs, None, 4, 8)
    params = init_params(cfg, 4, 8)
    logits, cache = network_forward(cfg, params, fs)
    _, _, dl = nn.softmax_xent(logits, fs.labels)
    grads = network_backward(cfg, params, cache, dl)
    nn.adagrad_step(params, grads, nn.AdagradState.for_params(params, cfg.lr))
    for name in params:
        np.testing.assert_allclose(trained.params[name], params[name], rtol=0, atol=1e-12)


def test_toy_convergence(rng):
    fs = separable(rng)
    cfg = ModelConfig(kind="mlp", dense_spec=(4,), epochs=50, batch_size=16, lr=0.05)
    _, log = fit(cfg, fs, None, 4, 8)
    assert log[-1].train_loss < np.log(2)
    assert log[-1].train_loss < log[0].train_loss


def test_best_epoch_selection(rng):
    fs, valid = separable(rng), separable(rng, n=40)
    cfg = ModelConfig(kind="mlp", dense_spec=(4,), epochs=8, batch_size=16)
    model, log = fit(cfg, fs, valid, 4, 8)
    assert all(model.valid_auc >= e.valid_auc - 1e-12 for e in log)
    assert auc(model.predict_proba(valid), valid.labels) == model.valid_auc


def test_training_errors(rng):
    fs = separable(rng)
    one_class = FeatureSet(labels=np.zeros(10, int), mean=np.zeros((10, 4)))
    with pytest.raises(ValueError, match="both classes"):
        fit(ModelConfig(kind="mlp"), one_class, None, 4, 8)
    fs.mean[3, 1] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        fit(ModelConfig(kind="mlp", epochs=3), fs, None, 4, 8)
    assert err.value.epoch == 1


def test_class_weights_change_training(rng):
    fs = separable(rng)
    a, _ = fit(ModelConfig(kind="mlp", epochs=2), fs, None, 4, 8)
    b, _ = fit(ModelConfig(kind="mlp", epochs=2, class_weights=(1.0, 4.0)), fs, None, 4, 8)
    assert not np.array_equal(a.params["out.W"], b.params["out.W"])


def test_save_load_deterministic(tmp_path, rng):
    rs = np.random.default_rng(1)
    fs = features(rs, n=12)
    fs.labels = np.r_[np.zeros(6, int), np.ones(6, int)]
    cfg = ModelConfig(kind="fused", epochs=2, batch_size=5, **TINY)
    m1, _ = fit(cfg, fs, None, 4, 8, "abc")
    m2, _ = fit(cfg, fs, None, 4, 8, "abc")
    m1.save(tmp_path / "a")
    m2.save(tmp_path / "b")
    for f in ("params.bin", "model.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    loaded = TrainedModel.load(tmp_path / "a")
    assert loaded.config == cfg and loaded.fingerprint == "abc"
    np.testing.assert_array_equal(loaded.logits(fs), m1.logits(fs))
    (tmp_path / "a" / "model.txt").write_text(
        (tmp_path / "a" / "model.txt").read_text().replace("fusion_spec=4", "fusion_spec=5")
    )
    with pytest.raises(ConfigError):
        TrainedModel.load(tmp_path / "a")


def test_split_train_valid_is_seeded():
    sessions = [Session(str(i), (Event(1, (("a", "x"),)),), i % 2) for i in range(20)]
    tr, va = models.split_train_valid(sessions, 0.25, 3)
    assert len(va) == 5 and len(tr) == 15
    assert models.split_train_valid(sessions, 0.25, 3) == (tr, va)
