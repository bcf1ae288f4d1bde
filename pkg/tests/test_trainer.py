import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from gazerep.model import GazeModel, load_checkpoint, parameter_digest
from gazerep.nll import gaze_bounds, init_label_bank, nll_loss, squash
from gazerep.pseudolabel import OracleLabeler, label_corpus
from gazerep.synthcorpus import CorpusConfig, synthesize
from gazerep.trainer import (
    NonFiniteLossError,
    TrainConfig,
    eye_orientation_loss,
    head_pose_loss,
    init_banks,
    make_training_set,
    pseudo_gaze_loss,
    total_loss,
    train_multitask,
)

from oracles import fd_relative_error

D = torch.float64


def test_cosine_loss_anchor_values():
    g = torch.tensor([[0.3, -0.2, -0.93]], dtype=D)
    assert float(pseudo_gaze_loss(g, 2.5 * g)) == pytest.approx(0.0, abs=1e-12)
    assert float(pseudo_gaze_loss(torch.tensor([[1.0, 0, 0]]), torch.tensor([[0, 1.0, 0]]))) == pytest.approx(1.0)
    assert float(pseudo_gaze_loss(g, -g)) == pytest.approx(2.0, abs=1e-12)


def test_cosine_loss_range_and_zero_guard(caplog):
    rng = torch.Generator().manual_seed(0)
    a, b = torch.randn(500, 3, generator=rng), torch.randn(500, 3, generator=rng)
    v = pseudo_gaze_loss(a, b)
    assert (v >= 0).all() and (v <= 2).all()
    z = torch.zeros(1, 3, requires_grad=True)
    loss = pseudo_gaze_loss(torch.tensor([[0.0, 0.0, -1.0]]), z)
    loss.sum().backward()
    assert torch.isfinite(z.grad).all()
    assert "near-zero" in caplog.text


def test_head_pose_loss_anchor_values():
    h = torch.tensor([[0.1, 0.2, -0.3, 0.01, 0.02, 1.0]], dtype=D)
    assert float(head_pose_loss(h, h)) == 0.0
    h2 = h.clone()
    h2[0, 4] += 0.1
    assert float(head_pose_loss(h, h2)) == pytest.approx(0.1**2 / 6, abs=1e-12)
    a, b = h.clone(), h.clone()
    a[0, 1], b[0, 1] = math.pi - 0.05, -math.pi + 0.05
    assert float(head_pose_loss(a, b)) == pytest.approx(0.1**2 / 6, abs=1e-12)
    with pytest.raises(ValueError):
        head_pose_loss(h, h * float("nan"))


def test_cross_entropy_anchor_values():
    L = torch.tensor([0])
    assert float(eye_orientation_loss(L, torch.tensor([[20.0, -20.0]], dtype=D))) == pytest.approx(0.0, abs=1e-15)
    assert float(eye_orientation_loss(L, torch.zeros(1, 2, dtype=D))) == pytest.approx(math.log(2), abs=1e-9)
    assert float(eye_orientation_loss(L, torch.tensor([[-20.0, 20.0]], dtype=D))) == pytest.approx(40.0, abs=1e-9)


def _batch(n=6, seed=0):
    gen = torch.Generator().manual_seed(seed)
    gaze = torch.nn.functional.normalize(torch.randn(n, 3, generator=gen, dtype=D) + torch.tensor([0, 0, -3.0], dtype=D))
    head = torch.cat([0.3 * torch.randn(n, 3, generator=gen, dtype=D), 0.05 * torch.randn(n, 2, generator=gen, dtype=D),
                      1 + 0.05 * torch.randn(n, 1, generator=gen, dtype=D)], dim=1)
    side = torch.randint(0, 2, (n,), generator=gen)
    return {"ids": [f"s{i}" for i in range(n)], "gaze": gaze, "head": head, "side": side}


def _outputs(batch, seed=1):
    gen = torch.Generator().manual_seed(seed)
    n = len(batch["ids"])
    return (torch.zeros(n, 4, dtype=D), 0.3 * torch.randn(n, 3, generator=gen, dtype=D) + batch["gaze"],
            batch["head"] + 0.1 * torch.randn(n, 6, generator=gen, dtype=D), torch.randn(n, 2, generator=gen, dtype=D))


def _banks(batch):
    data = dataclasses.make_dataclass("T", ["ids", "gaze", "head"])(batch["ids"], batch["gaze"], batch["head"])
    banks = init_banks(data, TrainConfig())
    for b in banks.values():
        b.double()
    return banks


def test_gradients_match_finite_differences():
    batch = _batch()
    _, g, h, lr = _outputs(batch)
    assert fd_relative_error(lambda x: pseudo_gaze_loss(batch["gaze"], x).sum(), g) <= 1e-4
    assert fd_relative_error(lambda x: head_pose_loss(batch["head"], x).sum(), h) <= 1e-4
    assert fd_relative_error(lambda x: eye_orientation_loss(batch["side"], x).sum(), lr) <= 1e-4
    bank = init_label_bank(np.random.default_rng(0).uniform(0.1, 0.9, (6, 3)), K=10, bounds=gaze_bounds(), dtype=D)
    yhat = bank.yhat

    def bank_loss(U):
        a, c = nll_loss(g, torch.sigmoid(U), yhat, bank.bounds)
        return a + c

    assert fd_relative_error(bank_loss, bank.U.detach()) <= 1e-4


def test_total_loss_gradient_matches_finite_differences():
    batch = _batch()
    outputs = _outputs(batch)
    banks = _banks(batch)
    cfg = TrainConfig()
    flat = torch.cat([t.reshape(-1) for t in outputs[1:]])
    sizes = [t.numel() for t in outputs[1:]]

    def f(x):
        g, h, lr = torch.split(x, sizes)
        return total_loss(batch, (outputs[0], g.view(-1, 3), h.view(-1, 6), lr.view(-1, 2)), banks, cfg).total

    assert fd_relative_error(f, flat) <= 1e-4


def test_total_is_sum_of_standalone_terms():
    batch = _batch()
    outputs = _outputs(batch)
    banks = _banks(batch)
    bd = total_loss(batch, outputs, banks, TrainConfig())
    _, g, h, lr = outputs
    expected = (pseudo_gaze_loss(batch["gaze"], g).mean() + head_pose_loss(batch["head"], h).mean()
                + eye_orientation_loss(batch["side"], lr).mean())
    for name, pred, target in (("gaze", g, batch["gaze"]), ("head", h, batch["head"])):
        bank = banks[name]
        a, c = nll_loss(pred, bank.y_d(bank.rows(batch["ids"])), squash(target, bank.bounds), bank.bounds)
        expected = expected + a + c
    assert bd.total.item() == pytest.approx(expected.item(), rel=1e-12)
    assert set(bd.terms) == {"pseudo_gaze", "head_pose", "eye_side", "nll_gaze_reg", "nll_gaze_c",
                             "nll_head_reg", "nll_head_c"}


def test_only_eye_side_with_perfect_predictions():
    batch = _batch()
    logits = torch.stack([torch.where(batch["side"] == 0, 30.0, -30.0), torch.where(batch["side"] == 1, 30.0, -30.0)], 1)
    out = (None, torch.randn(6, 3), torch.randn(6, 6), logits.double())
    bd = total_loss(batch, out, None, TrainConfig(enabled_tasks=("eye-side",), nll_enabled=False))
    assert float(bd.total) == pytest.approx(0.0, abs=1e-12)


def _head_grads(cfg, banks=None):
    model = GazeModel().double()
    batch = _batch(4)
    x = torch.rand(4, 1, 48, 64, dtype=D, generator=torch.Generator().manual_seed(3))
    total_loss(batch, model(x), banks, cfg).total.backward()
    return {n: m.weight.grad for n, m in (("gaze", model.gaze_head), ("pose", model.pose_head), ("side", model.side_head))}


def test_zero_weight_and_disabled_tasks_give_zero_head_gradient():
    grads = _head_grads(TrainConfig(w_g=0.0, nll_enabled=False))
    assert grads["gaze"] is None or torch.count_nonzero(grads["gaze"]) == 0
    grads = _head_grads(TrainConfig(w_g=0.0), _banks(_batch(4)))
    assert torch.count_nonzero(grads["gaze"]) > 0  # still driven by the gaze-bank NLL term
    grads = _head_grads(TrainConfig(enabled_tasks=("pseudo-gaze", "eye-side"), nll_enabled=False))
    assert grads["pose"] is None and torch.count_nonzero(grads["side"]) > 0


def test_nll_requires_banks():
    with pytest.raises(RuntimeError, match="banks"):
        total_loss(_batch(), _outputs(_batch()), None, TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(enabled_tasks=())
    with pytest.raises(ValueError):
        TrainConfig(enabled_tasks=("gaze",))
    assert TrainConfig.full_scale().epochs == 500


@pytest.fixture(scope="module")
def small_set():
    samples = synthesize(CorpusConfig(n_subjects=2, samples_per_subject=32, seed=5))
    kept, labels = label_corpus(OracleLabeler(), samples)
    return make_training_set(kept, labels)


def test_zero_epochs_keeps_initialization(small_set, tmp_path):
    res = train_multitask(small_set, TrainConfig(epochs=0, seed=4), out_dir=tmp_path)
    model, banks, meta = load_checkpoint(tmp_path / "final.npz")
    assert parameter_digest(model) == parameter_digest(GazeModel(dataclasses.replace(model.cfg, seed=4)).eval())
    assert meta["epoch"] == 0 and res.log == []
    assert torch.equal(banks["gaze"].U, res.banks["gaze"].U)


def test_nan_image_aborts_with_sample_id(small_set):
    bad = dataclasses.replace(small_set, images=small_set.images.clone())
    bad.images[5, 0, 10, 10] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train_multitask(bad, TrainConfig(epochs=1, batch_size=64))
    assert info.value.ids == [small_set.ids[5]]
    assert small_set.ids[5] in str(info.value)


def test_runs_are_reproducible_and_logged(small_set, tmp_path):
    cfg = TrainConfig(epochs=2, seed=9, threads=1)
    a = train_multitask(small_set, cfg, out_dir=tmp_path / "a")
    b = train_multitask(small_set, cfg, out_dir=tmp_path / "b")
    for ra, rb in zip(a.log, b.log):
        for k in ra:
            if k != "wall_time":
                assert ra[k] == pytest.approx(rb[k], abs=1e-9)
    rows = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert {"pseudo_gaze", "head_pose", "eye_side", "nll_gaze_reg", "total", "pseudo_gaze_error_deg",
            "wall_time"} <= set(rows[0])
    assert (tmp_path / "a" / "best.npz").exists() and (tmp_path / "a" / "final.npz").exists()


def test_bank_moves_only_rows_in_the_batch(small_set):
    banks = init_banks(small_set, TrainConfig())
    U0 = {k: b.U.detach().clone() for k, b in banks.items()}
    model = GazeModel().eval()
    for p in model.parameters():
        p.requires_grad_(False)
    idx = torch.arange(8)
    batch = {"ids": small_set.ids[:8], "gaze": small_set.gaze[idx], "head": small_set.head[idx],
             "side": small_set.side[idx]}
    opt = torch.optim.SGD([b.U for b in banks.values()], lr=10.0)
    total_loss(batch, model(small_set.images[idx]), banks, TrainConfig()).total.backward()
    opt.step()
    for k, b in banks.items():
        assert not torch.equal(b.U[:8], U0[k][:8])
        assert torch.equal(b.U[8:], U0[k][8:])


def test_bank_changes_after_one_epoch(small_set):
    res = train_multitask(small_set, TrainConfig(epochs=1))
    fresh = init_banks(small_set, TrainConfig())
    assert not torch.equal(res.banks["gaze"].U, fresh["gaze"].U)
    assert not torch.equal(res.banks["head"].U, fresh["head"].U)
