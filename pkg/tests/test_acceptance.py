"""Acceptance criteria, one test per criterion, one printed verdict line each.

Run order matters only for readability; every criterion is independent
except 11, which reuses the end-to-end runs of 8 via a session fixture.
Paper-scale absolute accuracy is explicitly out of scope at desk scale
(criterion 1 covers the full-size configuration with a smoke step only).
"""

import math
import os
import time

import numpy as np
import pytest

from fipmae import autodiff as ad
from fipmae.finetune import evaluate_on_samples, finetune, model_classifier
from fipmae.gradcheck_suite import run_gradcheck_suite
from fipmae.modalities import MODALITIES, ModalityKind, RenderConfig, build_sample
from fipmae.model import (FULL_CONFIG, ModelConfig, ModelParams, forward_pretrain,
                          sample_mask)
from fipmae.sigsim import ModulationScheme, add_awgn, measure_snr, synthesize
from fipmae.storage import (StorageError, compute_dataset_stats, load_checkpoint,
                            load_dataset, read_tensor, save_checkpoint, save_dataset,
                            write_tensor)
from fipmae.training import (FipConfig, TrainState, adamw_step, fip_loss,
                             make_mask_plan, masked_mse, pretrain,
                             resolve_decoder_layers, target_patches)
from tests.conftest import make_samples
from tests.test_storage import dir_digest

DESK = ModelConfig()
TARGET = ModalityKind.CONSTELLATION
SNR_GRID = [float(v) for v in range(-10, 12, 2)]


def verdict(num, ok, text):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}", flush=True)
    assert ok, f"criterion {num}: {text}"


# ---------------------------------------------------------------------------
# criterion 8 + 11 shared runs


def _e2e_dataset(n, base_seed, snr_grid=None, labeled=True):
    return make_samples(n, base_seed, snr_values=snr_grid, labeled=labeled)


@pytest.fixture(scope="session")
def e2e_runs():
    """512 unlabeled + 256 labeled + 512 grid test samples; 5 seed pairs of
    fip/uniform pretraining, identical fine-tuning, grid evaluation."""
    t0 = time.time()
    unlabeled = _e2e_dataset(512, 9001, labeled=False)
    labeled = _e2e_dataset(256, 9002)
    test = _e2e_dataset(512, 9003, snr_grid=SNR_GRID)
    stats = compute_dataset_stats(unlabeled)
    results = {"fip": [], "uniform": [], "elapsed": None}
    for s in range(5):
        for mode in ("fip", "uniform"):
            fip_cfg = FipConfig(mode=mode)
            model_cfg = resolve_decoder_layers(DESK, fip_cfg, target_depth=4, other_depth=2)
            params = ModelParams.init(model_cfg, np.random.default_rng(1000 + s))
            pretrain(unlabeled, params, fip_cfg, epochs=30, batch_size=16,
                     seed=1000 + s, base_lr=1e-3, stats=stats)
            finetune(params, labeled, epochs=30, base_lr=2e-3, seed=2000 + s,
                     batch_size=16, stats=stats)
            report = evaluate_on_samples(model_classifier(params, stats), test,
                                         model_cfg.n_classes)
            results[mode].append(report)
            print(f"  seed {s} {mode}: overall {report.overall_accuracy:.3f} "
                  f"({time.time() - t0:.0f}s elapsed)", flush=True)
    results["elapsed"] = time.time() - t0
    return results


# ---------------------------------------------------------------------------


def test_criterion_01_full_size_smoke_step():
    """Paper-scale accuracy is NOT reproduced here (needs 10k samples at
    224x224, d=768); the full-size configuration must still run one
    forward/backward step without error inside 10 minutes."""
    t0 = time.time()
    cfg = FULL_CONFIG
    params = ModelParams.init(cfg, np.random.default_rng(0))
    sample = build_sample(ModulationScheme.QPSK, 0.0, np.random.default_rng(1),
                          RenderConfig(image_size=224))
    plan = make_mask_plan(FipConfig(), cfg, np.random.default_rng(2))
    params.zero_grad()
    preds = forward_pretrain(sample, plan, params)
    losses = {m: masked_mse(p, target_patches(sample, m, cfg, None), plan.masks[m])[0]
              for m, p in preds.items()}
    total = fip_loss(losses, FipConfig())
    ad.backward(total)
    grad_norm = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                              for t in params.tensors.values() if t.grad is not None))
    elapsed = time.time() - t0
    ok = math.isfinite(float(total.data)) and grad_norm > 0 and elapsed < 600
    verdict(1, ok, f"full-size (224/16/768, L_e=12, L_d 8/4) forward/backward smoke "
                   f"in {elapsed:.0f}s, loss {float(total.data):.3f}, grad norm "
                   f"{grad_norm:.2f}; paper-scale accuracy out of scope at desk scale")


def test_criterion_02_masking_exactness():
    t0 = time.time()
    cases = {(16, 0.80): 13, (16, 0.60): 10, (196, 0.80): 157, (196, 0.60): 118}
    ok = True
    for (n, ratio), expected in cases.items():
        for seed in range(1000):
            got = int(sample_mask(n, ratio, np.random.default_rng(seed)).sum())
            if got != expected:
                ok = False
                break
    elapsed = time.time() - t0
    verdict(2, ok and elapsed < 1.0,
            f"masked counts exactly {list(cases.values())} for "
            f"{list(cases.keys())}, 1000 draws each, zero tolerance ({elapsed:.2f}s)")


def test_criterion_03_loss_algebra():
    vals = [2.0, 1.0, 3.0, 0.0]
    losses = {m: ad.tensor(v, dtype=np.float64) for m, v in zip(MODALITIES, vals)}
    worked = fip_loss(losses, FipConfig(w_target=1.0, w_other=0.5)).item()
    reduced = fip_loss(losses, FipConfig(w_other=0.0)).item()
    uniform = fip_loss(losses, FipConfig(mode="uniform")).item()
    ok = worked == 4.0 and reduced == 2.0 and uniform == sum(vals)
    verdict(3, ok, f"worked example = {worked} (exact 4.0); w_other=0 -> L_target "
                   f"({reduced}); uniform = unweighted sum ({uniform})")


def test_criterion_04_gradient_correctness():
    t0 = time.time()
    report = run_gradcheck_suite(seed=0, n_seeds=20, full_loss_seeds=20)
    elapsed = time.time() - t0
    ok = report["passed"] and report["worst"] < 1e-3 and elapsed < 300
    verdict(4, ok, f"{report['n_checks']} checks (every primitive x20 seeds + full "
                   f"tiny-model pretrain loss x20 seeds), worst rel error "
                   f"{report['worst']:.2e} < 1e-3 double precision ({elapsed:.0f}s)")


def test_criterion_05_gradient_flow_isolation():
    t0 = time.time()
    params = ModelParams.init(DESK, np.random.default_rng(50))
    cfg = FipConfig(w_other=0.0)
    sample = make_samples(1, 5050)[0]
    plan = make_mask_plan(cfg, DESK, np.random.default_rng(51))
    params.zero_grad()
    preds = forward_pretrain(sample, plan, params)
    losses = {m: masked_mse(p, target_patches(sample, m, DESK, None), plan.masks[m])[0]
              for m, p in preds.items()}
    ad.backward(fip_loss(losses, cfg))
    nontarget_zero = all(
        t.grad is None or not np.any(t.grad)
        for n, t in params.items()
        if n.startswith("decoder.") and not n.startswith(f"decoder.{TARGET.value}"))
    enc_norm = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                             for n, t in params.items()
                             if n.startswith("encoder.") and t.grad is not None))
    elapsed = time.time() - t0
    ok = nontarget_zero and enc_norm > 0 and elapsed < 10
    verdict(5, ok, f"w_other=0: non-target decoder grads exactly zero, encoder grad "
                   f"norm {enc_norm:.3e} > 0 ({elapsed:.1f}s)")


def test_criterion_06_overfit_sanity():
    t0 = time.time()
    passes = 0
    finals = []
    for seed in range(5):
        sample = make_samples(1, 6000 + seed)[0]
        params = ModelParams.init(DESK, np.random.default_rng(seed))
        plan = make_mask_plan(FipConfig(), DESK, np.random.default_rng(600 + seed))
        state = TrainState.new(params, 1e-3, 500, seed)
        targets = {m: target_patches(sample, m, DESK, None) for m in MODALITIES}
        total_mse = None
        for _step in range(500):
            params.zero_grad()
            preds = forward_pretrain(sample, plan, params)
            losses = {m: masked_mse(p, targets[m], plan.masks[m])[0]
                      for m, p in preds.items()}
            total_mse = sum(float(l.data) for l in losses.values())
            ad.backward(fip_loss(losses, FipConfig()))
            adamw_step(params, state, lr=1e-3)
        finals.append(total_mse)
        passes += total_mse < 0.01
    elapsed = time.time() - t0
    ok = passes >= 4 and elapsed < 300
    verdict(6, ok, f"one sample/one fixed mask, 500 steps @ lr 1e-3: total masked MSE "
                   f"{['%.4f' % f for f in finals]}, {passes}/5 seeds < 0.01 ({elapsed:.0f}s)")


def test_criterion_07_channel_calibration():
    t0 = time.time()
    hits = {snr: 0 for snr in (-10.0, 0.0, 10.0)}
    for snr in hits:
        for seed in range(100):
            sig = synthesize(ModulationScheme.QPSK, 4096, 4, np.random.default_rng((70, seed)))
            ch = add_awgn(sig, snr, np.random.default_rng((71, seed)))
            if abs(measure_snr(ch.clean, ch.noise) - snr) <= 0.5:
                hits[snr] += 1
    elapsed = time.time() - t0
    ok = all(h >= 99 for h in hits.values()) and elapsed < 30
    verdict(7, ok, f"measured SNR within +-0.5 dB: {hits} of 100 seeds each at "
                   f"n_symbols=4096 ({elapsed:.0f}s)")


def test_criterion_08_fip_vs_uniform_end_to_end(e2e_runs):
    fip_acc = [r.overall_accuracy for r in e2e_runs["fip"]]
    uni_acc = [r.overall_accuracy for r in e2e_runs["uniform"]]
    diffs = [f - u for f, u in zip(fip_acc, uni_acc)]
    mean_fip = float(np.mean(fip_acc))
    mean_uni = float(np.mean(uni_acc))
    mean_diff = float(np.mean(diffs))
    print(f"\n  informational: FIP advantage per seed {['%+.3f' % d for d in diffs]}, "
          f"mean {mean_diff:+.3f} (FIP {mean_fip:.3f} vs uniform {mean_uni:.3f})",
          flush=True)
    ok = (mean_fip > 0.15 and mean_uni > 0.15 and mean_diff >= -0.02
          and e2e_runs["elapsed"] <= 3600)
    verdict(8, ok, f"both modes beat chance (FIP {mean_fip:.3f}, uniform {mean_uni:.3f} "
                   f"> 0.15); mean FIP-uniform {mean_diff:+.3f} >= -0.02; "
                   f"{e2e_runs['elapsed']:.0f}s <= 1 hr")


def test_criterion_09_reproducibility(tmp_path):
    t0 = time.time()
    data = make_samples(16, 9100, labeled=False)
    stats = compute_dataset_stats(data)

    def run_to(directory):
        fip = FipConfig()
        params = ModelParams.init(DESK, np.random.default_rng(91))
        res = pretrain(data, params, fip, epochs=2, batch_size=8, seed=91, stats=stats)
        save_checkpoint(directory, res.params, DESK, fip, res.state, stats)

    run_to(tmp_path / "a")
    run_to(tmp_path / "b")
    identical = dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    # resume at step 2 of 4 must equal the straight run bit-exactly
    fip = FipConfig()
    params = ModelParams.init(DESK, np.random.default_rng(92))
    pretrain(data, params, fip, epochs=2, batch_size=8, seed=92, stats=stats,
             checkpoint_every=2,
             on_checkpoint=lambda step, p, s, lg:
                 save_checkpoint(tmp_path / "mid", p, DESK, fip, s, stats)
                 if step == 2 else None)
    loaded, _mc, fc, st, st_stats = load_checkpoint(tmp_path / "mid")
    res_resumed = pretrain(data, loaded, fc, epochs=2, batch_size=8, seed=92,
                           state=st, start_step=st.step, stats=st_stats)
    params_straight = ModelParams.init(DESK, np.random.default_rng(92))
    res_straight = pretrain(data, params_straight, fip, epochs=2, batch_size=8,
                            seed=92, stats=stats)
    resume_ok = all(np.array_equal(res_resumed.params[n].data, res_straight.params[n].data)
                    for n in res_straight.params.names())
    resume_ok = resume_ok and np.array_equal(res_resumed.state.m, res_straight.state.m)
    elapsed = time.time() - t0
    ok = identical and resume_ok and elapsed < 600
    verdict(9, ok, f"same config+seed -> byte-identical checkpoints ({identical}); "
                   f"resume-at-k bit-equals straight run ({resume_ok}) ({elapsed:.0f}s)")


def test_criterion_10_format_round_trips(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(100)
    arr = rng.normal(size=(4, 7)).astype(np.float32)
    write_tensor(tmp_path / "t.fipt", arr)
    tensor_ok = np.array_equal(read_tensor(tmp_path / "t.fipt"), arr)

    raw = bytearray((tmp_path / "t.fipt").read_bytes())
    raw[1] ^= 0x55
    (tmp_path / "bad.fipt").write_bytes(bytes(raw))
    try:
        read_tensor(tmp_path / "bad.fipt")
        named_ok = False
    except StorageError as e:
        named_ok = "magic" in str(e)

    samples = make_samples(5, 101)
    save_dataset(tmp_path / "ds", samples)
    back, _, _ = load_dataset(tmp_path / "ds")
    ds_ok = all(np.array_equal(a.inputs[m], b.inputs[m])
                and np.array_equal(a.targets[m], b.targets[m])
                for a, b in zip(samples, back) for m in MODALITIES)

    params = ModelParams.init(DESK, np.random.default_rng(102))
    fip = FipConfig()
    state = TrainState.new(params, 1e-3, 10, 102)
    save_checkpoint(tmp_path / "ck", params, DESK, fip, state)
    loaded, _, _, st, _ = load_checkpoint(tmp_path / "ck")
    ck_ok = all(np.array_equal(loaded[n].data, params[n].data) for n in params.names())
    ck_ok = ck_ok and st.step == 0 and np.array_equal(st.m, state.m)
    elapsed = time.time() - t0
    ok = tensor_ok and named_ok and ds_ok and ck_ok and elapsed < 10
    verdict(10, ok, f"tensor/dataset/checkpoint round-trips bit-exact; corrupt header "
                    f"rejected naming 'magic' ({elapsed:.1f}s)")


def test_criterion_11_snr_trend(e2e_runs):
    wins = 0
    pairs = []
    for report in e2e_runs["fip"]:
        lo, hi = report.per_snr[-10.0], report.per_snr[10.0]
        pairs.append((lo, hi))
        wins += hi > lo
    ok = wins >= 4
    verdict(11, ok, f"accuracy(+10 dB) > accuracy(-10 dB) in {wins}/5 fip seeds "
                    f"(pairs low/high: {[('%.2f' % a, '%.2f' % b) for a, b in pairs]})")
