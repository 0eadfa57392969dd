import json
import math

import numpy as np
import pytest

from apl_avqa import tensorcore as tc
from apl_avqa.harness import cli
from apl_avqa.harness.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from apl_avqa.harness.config import TrainConfig, load_config, paper_preset
from apl_avqa.harness.evaluate import EvalReport, SelectionScore, evaluate, inspect, run_inference
from apl_avqa.harness.gradcheck import GradCheckConfig, gradcheck
from apl_avqa.harness.optim import Adam, AdamState, adam_step, lr_at
from apl_avqa.harness.train import LOG_KEYS, length_buckets, make_batch, total_loss, train
from apl_avqa.model import APLModel
from apl_avqa.positivity import AUDIO_OBJECT, LossConfig, LossReport, positivity_loss
from apl_avqa.scenes import EXISTENTIAL, answer_id, generate_dataset, write_container

from oracles import cosine, softmax


@pytest.fixture(scope="module")
def data():
    return generate_dataset(0, 150)


@pytest.fixture(scope="module")
def quick(data):
    config = TrainConfig(epochs=2, seed=1)
    return train(config, data[0], data[1])


def report_with(L_pc):
    z = tc.tensor(np.asarray(L_pc, dtype=np.float64), dtype=np.float64)
    return LossReport(z, z, z)


# -- total loss -----------------------------------------------------------------------


def test_uniform_prediction_total_loss():
    log_p = tc.tensor(np.log(np.full((1, 6), 1 / 6)), dtype=np.float64)
    rep = total_loss(log_p, [2], report_with([1.0]), lam=0.3)
    assert rep.L_ce.item() == pytest.approx(math.log(6), abs=1e-12)
    assert rep.L_total.item() == pytest.approx(math.log(6) + 0.3, abs=1e-12)
    assert rep.L_total.item() == pytest.approx(2.0918, abs=1e-4)


def test_one_hot_prediction_has_zero_ce():
    p = np.full((1, 4), 1e-300)
    p[0, 1] = 1.0
    rep = total_loss(tc.tensor(np.log(p), dtype=np.float64), [1], report_with([0.7]), lam=0.0)
    assert rep.L_ce.item() == 0.0
    assert rep.L_total is rep.L_ce


def test_label_out_of_range():
    log_p = tc.tensor(np.log(np.full((1, 4), 0.25)))
    with pytest.raises(ValueError):
        total_loss(log_p, [4], report_with([0.0]), lam=0.3)


# -- optimiser ------------------------------------------------------------------------


def test_adam_zero_gradient_is_a_no_op():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = np.array([0.5])
    lr, g = 1e-3, 0.37
    adam_step([p], [np.array([g])], AdamState(), lr=lr)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert 0.5 - p[0] == pytest.approx(lr * g / (g + 1e-8), rel=1e-12)
    assert 0.5 - p[0] == pytest.approx(lr, rel=1e-6)


def test_adam_matches_closed_form_two_steps():
    p = np.array([0.0])
    st = AdamState()
    grads = [0.2, -0.1]
    m = v = 0.0
    expected = 0.0
    for k, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected -= 0.01 * (m / (1 - 0.9**k)) / (math.sqrt(v / (1 - 0.999**k)) + 1e-8)
        adam_step([p], [np.array([g])], st, lr=0.01)
    assert p[0] == pytest.approx(expected, rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(tc.DimensionError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)


def test_adam_identical_runs_are_bit_identical():
    def run():
        x = tc.tensor(np.array([1.0, 2.0, -3.0]), requires_grad=True)
        opt = Adam([x])
        for _ in range(5):
            opt.zero_grad()
            tc.backward((x * x * x).sum(), [x])
            opt.step(0.01)
        return x.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_lr_schedule():
    config = TrainConfig(lr_init=1e-4)
    assert lr_at(0, config) == 1e-4
    assert lr_at(7, config) == 1e-4
    assert lr_at(8, config) == pytest.approx(1e-5)
    assert lr_at(16, config) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        lr_at(-1, config)


# -- config ---------------------------------------------------------------------------


def test_config_json_round_trip(tmp_path):
    config = TrainConfig(epochs=3, loss=LossConfig(lam=0.1, phi=0.2))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(config.to_dict()))
    back = load_config(path)
    assert back == config and back.hash() == config.hash()
    assert TrainConfig(seed=1).hash() != config.hash()


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_factor=1.5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_paper_presets():
    detr = paper_preset("detr")
    frcnn = paper_preset("faster-rcnn")
    assert (detr.lr_init, detr.loss.phi, detr.batch_size, detr.epochs) == (1e-4, 0.011, 64, 20)
    assert (frcnn.lr_init, frcnn.loss.phi) == (1.75e-4, 0.028)


# -- training -------------------------------------------------------------------------


def test_batches_share_one_length(data):
    train_set = data[0]
    order = np.random.default_rng(0).permutation(len(train_set))
    batches = length_buckets(train_set, order, 16)
    assert sorted(np.concatenate(batches).tolist()) == list(range(len(train_set)))
    for idx in batches:
        assert len(set(train_set.lengths[idx])) == 1 and len(idx) <= 16
        make_batch(train_set, idx)
    mixed = [int(np.argmin(train_set.lengths)), int(np.argmax(train_set.lengths))]
    with pytest.raises(ValueError):
        make_batch(train_set, mixed)


def test_metrics_log_schema(quick):
    assert len(quick.metrics) == 2
    for rec in quick.metrics:
        assert tuple(rec) == LOG_KEYS
        json.dumps(rec)
        assert 0 <= rec["train_acc"] <= 1 and 0 <= rec["val_acc"] <= 1


def test_training_is_deterministic(data, quick):
    again = train(TrainConfig(epochs=2, seed=1), data[0], data[1])
    assert json.dumps(again.metrics) == json.dumps(quick.metrics)
    for a, b in zip(again.model.parameters(), quick.model.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_best_epoch_holds_the_highest_val_accuracy(quick):
    accs = [m["val_acc"] for m in quick.metrics]
    assert quick.best_epoch == int(np.argmax(accs))  # argmax keeps the first tie
    assert quick.best_val_acc == max(accs)


def test_dims_mismatch_rejected(data):
    from apl_avqa.scenes import SceneDims

    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1, scene=SceneDims(T=3)), data[0])


def test_training_loss_falls_early():
    train_set, _, _ = generate_dataset(4, 250, (0.8, 0.1, 0.1), noise_sigma=0.0)
    result = train(TrainConfig(epochs=4), train_set)
    losses = [m["train_loss"] for m in result.metrics]
    smooth = np.convolve(losses, np.ones(2) / 2, mode="valid")
    assert np.all(np.diff(smooth[:3]) <= 0)


# -- checkpoint -----------------------------------------------------------------------


def test_checkpoint_round_trip_reproduces_eval(tmp_path, data, quick):
    path = tmp_path / "m.aplc"
    save_checkpoint(path, quick.model, quick.config, {"best_epoch": quick.best_epoch})
    model, config, extra = load_checkpoint(path)
    assert config == quick.config and extra == {"best_epoch": quick.best_epoch}
    a = evaluate(quick.model, data[2], config.loss).as_dict()
    b = evaluate(model, data[2], config.loss).as_dict()
    assert a == b


@pytest.mark.parametrize("damage", ["magic", "hash", "truncate", "trailing"])
def test_checkpoint_corruption(tmp_path, quick, damage):
    blob = bytearray(checkpoint_bytes(quick.model, quick.config))
    if damage == "magic":
        blob[:4] = b"XXXX"
    elif damage == "hash":
        i = blob.find(b'"config_hash": "') + len('"config_hash": "')
        blob[i] = ord("0") if blob[i] != ord("0") else ord("1")
    elif damage == "truncate":
        blob = blob[:-5]
    else:
        blob += b"\x00"
    path = tmp_path / "bad.aplc"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# -- evaluation -----------------------------------------------------------------------


def test_selection_score_counts():
    s = SelectionScore.from_counts(3, 1, 2)
    assert (s.precision, s.recall) == (0.75, 0.6)
    assert s.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert SelectionScore.from_counts(0, 0, 0).f1 == 0.0


def test_per_type_accuracy_three_of_four(data, quick, monkeypatch):
    from apl_avqa.harness import evaluate as ev

    container = data[2].subset(np.flatnonzero(data[2].question_types == EXISTENTIAL)[:4])
    labels = container.labels
    fake = labels.copy()
    fake[0] = (fake[0] + 1) % 13
    n, T, N = len(container), container.dims.T, container.dims.N
    monkeypatch.setattr(ev, "run_inference", lambda *a, **k: (fake, np.zeros((n, T, N), bool), np.zeros((n, T, N), bool)))
    report = ev.evaluate(quick.model, container)
    assert report.per_type == {"existential": 0.75}
    assert report.overall == 0.75


def test_overall_is_count_weighted(data, quick):
    r = evaluate(quick.model, data[2])
    total = sum(r.counts.values())
    weighted = sum(r.per_type[k] * r.counts[k] for k in r.per_type) / total
    assert r.overall == pytest.approx(weighted, abs=1e-12)
    for v in list(r.per_type.values()) + [r.overall]:
        assert 0 <= v <= 1


def test_evaluate_is_order_invariant(data, quick):
    test = data[2]
    perm = np.random.default_rng(5).permutation(len(test))
    assert evaluate(quick.model, test).as_dict() == evaluate(quick.model, test.subset(perm)).as_dict()


def test_random_model_at_chance_on_yes_no():
    from apl_avqa.scenes import TEMPLATES

    sets = generate_dataset(21, 3000, (1.0, 0.0, 0.0))
    c = sets[0]
    c = c.subset(np.flatnonzero(c.question_types == EXISTENTIAL))
    model = APLModel(TrainConfig().model_dims, seed=0)
    yes, no = answer_id("yes", 6), answer_id("no", 6)
    # chance level for a model that always picks one of the two answers
    model.head.W.data[...] = 0
    model.head.b.data[...] = 0
    model.head.b.data[yes] = 1.0
    preds, _, _ = run_inference(model, c)
    acc = float((preds == c.labels).mean())
    share_yes = float((c.labels == yes).mean())
    assert acc == pytest.approx(share_yes)
    assert abs(acc - 0.5) < 4 * math.sqrt(0.25 / len(c))
    assert set(np.unique(c.labels)) <= {yes, no}
    assert TEMPLATES["exist"]


def test_phi_zero_recall_is_one():
    sets = generate_dataset(2, 40, (1.0, 0.0, 0.0), noise_sigma=0.0)
    model = APLModel(TrainConfig().model_dims, seed=0)
    r = evaluate(model, sets[0], LossConfig(phi=0.0))
    assert r.positivity.recall == 1.0 and r.question_positivity.recall == 1.0


def test_inspect_dump(data, quick):
    dump = inspect(quick.model, data[2], 3, quick.config.loss)
    text = json.dumps(dump, allow_nan=False)
    again = json.loads(text)
    for key, att in again["attention"].items():
        np.testing.assert_allclose(np.sum(att["mean"], axis=-1), 1.0, atol=1e-5)
        for head in att["per_head"]:
            np.testing.assert_allclose(np.sum(head, axis=-1), 1.0, atol=1e-5)
    assert sum(again["p"]) == pytest.approx(1.0, abs=1e-5)
    # recompute the positivity records from the forward pass directly
    batch = make_batch(data[2], [3])
    out = quick.model(batch.audio, batch.objects, batch.tokens)
    rep = positivity_loss(out.question.F_q, out.enhanced.F_O_prime, out.enhanced.F_A_prime, quick.config.loss, N=8)
    ao = [r for r in again["positivity"] if r["pairing"] == AUDIO_OBJECT]
    assert len(ao) == 4
    for r in ao:
        assert r["s"] == rep.rows[AUDIO_OBJECT][0, r["t"]].tolist()
        assert r["P"] == np.flatnonzero(rep.masks[AUDIO_OBJECT][0, r["t"]]).tolist()
    # and the similarity itself against the plain-Python oracle
    O = out.enhanced.F_O_prime.data[0].reshape(4, 8, -1)
    A = out.enhanced.F_A_prime.data[0]
    np.testing.assert_allclose(ao[0]["s"], softmax([cosine(A[0], o) for o in O[0]]), atol=1e-5)
    with pytest.raises(IndexError):
        inspect(quick.model, data[2], len(data[2]))


# -- gradcheck ------------------------------------------------------------------------


def test_gradcheck_micro_dims():
    result = gradcheck()
    assert result.report.n_checked >= 500
    assert result.report.max_rel_err < 1e-5 and result.report.passed
    assert result.seconds < 60


def test_gradcheck_ce_only():
    assert gradcheck(GradCheckConfig(loss=LossConfig(lam=0.0), n_samples=200)).report.passed


# -- CLI ------------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    d = tmp_path / "d"
    assert cli.main(["gen-data", "--out", str(d), "--samples", "60", "--seed", "2"]) == 0
    ck = tmp_path / "m.aplc"
    log = tmp_path / "log.jsonl"
    assert cli.main(["train", "--data", str(d), "--epochs", "1", "--out", str(ck), "--log", str(log)]) == 0
    assert [tuple(json.loads(l)) for l in log.read_text().splitlines()] == [LOG_KEYS]
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(ck), "--data", str(d)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"per_type", "overall", "positivity"}
    out = tmp_path / "inspect.json"
    assert cli.main(["inspect", "--checkpoint", str(ck), "--data", str(d), "--index", "0", "--out", str(out)]) == 0
    json.loads(out.read_text())


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["no-such-command"]) == cli.USAGE
    assert cli.main(["train"]) == cli.USAGE
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text('{"nope": 1}')
    assert cli.main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(bad_cfg)]) == cli.USAGE
    junk = tmp_path / "junk.aplf"
    junk.write_bytes(b"garbage")
    assert cli.main(["eval", "--checkpoint", str(junk), "--data", str(junk)]) == cli.DATA
    d = tmp_path / "d"
    cli.main(["gen-data", "--out", str(d), "--samples", "9"])
    write_container(tmp_path / "empty.aplf", generate_dataset(0, 9)[2].subset(slice(0, 0)))
    assert cli.main(["train", "--data", str(tmp_path / "missing")]) == cli.DATA
    assert cli.main(["gradcheck", "--coords", "50"]) == cli.OK


def test_cli_gradcheck_failure_exit(monkeypatch):
    from apl_avqa.harness import gradcheck as gc

    real = gc.gradcheck

    def broken(config):
        result = real(config)
        result.report.passed = False
        return result

    monkeypatch.setattr(gc, "gradcheck", broken)
    assert cli.main(["gradcheck", "--coords", "20"]) == cli.CHECK
