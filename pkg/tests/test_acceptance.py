"""Acceptance gate: ten property-based criteria, one test per criterion.

Each test prints a single pass line with its runtime; a pytest failure on any
test is the corresponding fail line. Oracles here are deliberately independent
re-derivations (explicit loops, closed forms) rather than calls back into the
library code under test.
"""

import math
import time

import numpy as np
import torch

from lingtse.audio import AudioClip
from lingtse.backbone import BackboneConfig, extract, init_params
from lingtse.cli import main as cli_main
from lingtse.knowledge import (
    AdapterPair,
    Codebook,
    FeatureSequence,
    KnowledgeSourceSpec,
    _synthetic_map,
    fit_codebook,
    tokenize,
)
from lingtse.losses import (
    SISDR_EPS,
    LossWeights,
    lc_ce,
    lc_mse,
    si_sdr_loss,
    total_loss,
)
from lingtse.metrics import si_sdr, si_sdri, speech_bert_score, stoi
from lingtse.simulate import (
    build_manifest,
    load_manifest,
    make_synthetic_catalog,
    realize_entry,
    write_dataset,
)
from lingtse.trainer import (
    LoadedDataset,
    StageConfig,
    constraint_term,
    load_checkpoint,
    save_checkpoint,
    train_stage,
    validate,
)
from lingtse.visual import (
    FULL_MISSING,
    LOW_RESOLUTION,
    PARTIAL_OCCLUSION,
    ImpairmentSpec,
    VisualStream,
    apply_impairment,
)

SYNTH8 = KnowledgeSourceSpec(kind="synthetic", feature_dim=8, seed=0)


def _report(criterion: str, t0: float, limit_s: float) -> None:
    elapsed = time.perf_counter() - t0
    assert elapsed < limit_s, f"{criterion} exceeded {limit_s}s ({elapsed:.1f}s)"
    print(f"[PASS] {criterion} ({elapsed:.1f}s)")


def test_01_si_sdr_oracle():
    """Brute-force SI-SDR agreement within 1e-9 dB; scale invariance 1e-6."""
    t0 = time.perf_counter()

    def oracle(est, ref):
        dot = rp = 0.0
        for e, r in zip(est, ref):
            dot += e * r
            rp += r * r
        a = dot / rp
        num = den = 0.0
        for e, r in zip(est, ref):
            s = a * r
            num += s * s
            den += (e - s) * (e - s)
        ratio = (num + SISDR_EPS * den) / (den + SISDR_EPS * num)
        return 10.0 * math.log10(ratio)

    rng = np.random.default_rng(11)
    for _ in range(1000):
        est = rng.standard_normal(64)
        ref = rng.standard_normal(64)
        assert abs(si_sdr(est, ref) - oracle(est, ref)) < 1e-9
    est = rng.standard_normal(64)
    ref = rng.standard_normal(64)
    base = si_sdr(est, ref)
    for gain in (0.1, 1.0, 10.0):
        assert abs(si_sdr(gain * est, ref) - base) < 1e-6
    _report("criterion 1: SI-SDR oracle", t0, 5.0)


def test_02_mixture_snr_contract():
    """100 simulated mixtures each land within 0.01 dB of the requested SNR."""
    t0 = time.perf_counter()
    catalog = make_synthetic_catalog(
        n_speakers=6, clips_per_speaker=2, duration_s=2.0, seed=0
    )
    by_id = {e.clip_id: e for e in catalog}
    manifest = build_manifest(catalog, 100, 1.0, (-10.0, 10.0), global_seed=5)
    for entry in manifest.entries:
        sample = realize_entry(entry, by_id, manifest.duration_s)
        p_t = np.mean(sample.target.samples ** 2)
        p_i = np.mean(sample.interferer.samples ** 2)
        measured = 10.0 * np.log10(p_t / p_i)
        assert -10.0 <= entry.snr_db <= 10.0
        assert abs(measured - entry.snr_db) <= 0.01
        np.testing.assert_allclose(
            sample.mixture.samples,
            sample.target.samples + sample.interferer.samples,
            atol=1e-12,
        )
    _report("criterion 2: mixture SNR contract", t0, 10.0)


def test_03_quantizer_oracle():
    """tokenize equals an exhaustive loop oracle; ties go to the lowest index;
    k-means objective is non-increasing (asserted inside fit_codebook)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((1000, 8))
    for k in (2, 16, 500):
        cb = Codebook(rng.standard_normal((k, 8)))
        got = tokenize(FeatureSequence(frames), cb).tokens
        for t in range(frames.shape[0]):
            best, best_d = 0, math.inf
            for j in range(k):
                d = 0.0
                for a, b in zip(frames[t], cb.centroids[j]):
                    d += (a - b) ** 2
                if d < best_d:  # strict: first minimum wins
                    best, best_d = j, d
            assert got[t] == best
    # exact duplicate centroids force a tie on every frame
    dup = Codebook(np.vstack([np.zeros((2, 4)), np.ones((1, 4))]))
    toks = tokenize(FeatureSequence(rng.standard_normal((50, 4))), dup).tokens
    assert not np.any(toks == 1)
    # fit_codebook asserts the objective never increases between iterations
    feats = [FeatureSequence(rng.standard_normal((300, 8))) for _ in range(3)]
    for k in (2, 16):
        fit_codebook(feats, k=k, seed=0)
    _report("criterion 3: quantizer oracle", t0, 30.0)


def test_04_loss_identities():
    t0 = time.perf_counter()
    z = torch.randn(40, 8, generator=torch.Generator().manual_seed(0))
    assert lc_mse(z, z).item() == 0.0
    logits = torch.zeros(7, 500, dtype=torch.float64)
    tokens = torch.arange(7) * 70
    assert abs(lc_ce(logits, tokens).item() - math.log(500)) < 1e-9
    assert abs(math.log(500) - 6.2146) < 5e-5
    g = torch.Generator().manual_seed(1)
    est = torch.randn(2, 320, dtype=torch.float64, generator=g)
    ref = torch.randn(2, 320, dtype=torch.float64, generator=g)
    l_lc = torch.tensor(0.3125, dtype=torch.float64)
    total, report = total_loss(est, ref, LossWeights(), "pslm_mse", l_lc)
    l_rec = si_sdr_loss(est, ref)
    assert total.item() == (1.0 * l_rec + 10.0 * l_lc).item()
    assert report.l_sisdr == l_rec.item()
    _report("criterion 4: loss identities", t0, 5.0)


def test_05_gradient_checks():
    """Analytic vs central-difference gradients for every constraint kind."""
    t0 = time.perf_counter()
    cfg = BackboneConfig(enc_kernel=4, enc_stride=2, model_dim=8, n_blocks=1,
                         chunk_len=10, n_heads=2, visual_dim=4, seed=0)
    rng = np.random.default_rng(0)
    mix = torch.tensor(0.1 * rng.standard_normal((1, 1600)), dtype=torch.float64)
    ref = torch.tensor(0.1 * rng.standard_normal((1, 1600)), dtype=torch.float64)
    vis = torch.tensor(rng.standard_normal((1, 5, 4)), dtype=torch.float64)
    cb = fit_codebook([FeatureSequence(rng.standard_normal((40, 8)))], k=4, seed=0)
    adapters = AdapterPair(8, 8, hidden_dim=8, proj_dim=8, dtype=torch.float64)
    weights = LossWeights()

    for kind in ("none", "pslm_mse", "pslm_ce", "plm_mse"):
        model = init_params(cfg, dtype=torch.float64)
        assert sum(p.numel() for p in model.parameters()) <= 2000

        def loss_val():
            est = model(mix, vis)
            l_lc = None
            if kind != "none":
                l_lc = constraint_term(est, ref, ["ba de ki"], kind, SYNTH8,
                                       codebook=cb, adapters=adapters)
            return total_loss(est, ref, weights, kind, l_lc)[0]

        model.zero_grad()
        loss_val().backward()
        params = list(model.parameters())
        prng = np.random.default_rng(42)
        h = 1e-6
        for _ in range(20):
            p = params[prng.integers(len(params))]
            fi = int(prng.integers(p.numel()))
            analytic = p.grad.reshape(-1)[fi].item()
            with torch.no_grad():
                orig = p.reshape(-1)[fi].item()
                p.reshape(-1)[fi] = orig + h
                lp = loss_val().item()
                p.reshape(-1)[fi] = orig - h
                lm = loss_val().item()
                p.reshape(-1)[fi] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
            assert rel < 1e-3, f"{kind}: rel error {rel:.2e}"
    _report("criterion 5: gradient checks", t0, 300.0)


def test_06_shape_and_impairment_contracts():
    t0 = time.perf_counter()
    cfg = BackboneConfig(enc_kernel=16, enc_stride=8, model_dim=32, n_blocks=1,
                         chunk_len=50, n_heads=4, visual_dim=8, seed=0)
    model = init_params(cfg)
    rng = np.random.default_rng(6)
    for length in (cfg.enc_kernel, 16000, 16001, 64000):
        clip = AudioClip(0.1 * rng.standard_normal(length), 16000)
        t_v = max(1, int(round(length / 16000 * 25)))
        stream = VisualStream(rng.standard_normal((t_v, 8)))
        est = extract(clip, stream, model)
        assert len(est) == length

    frames = rng.standard_normal((100, 8))
    cases = [(FULL_MISSING, "blur"), (PARTIAL_OCCLUSION, "blur"),
             (LOW_RESOLUTION, "blur"), (LOW_RESOLUTION, "noise")]
    for i in range(101):
        ratio = i / 100
        expected = round(ratio * 100)
        for kind, mode in cases:
            spec = ImpairmentSpec(kind=kind, ratio=ratio, seed=i,
                                  low_res_mode=mode)
            out = apply_impairment(VisualStream(frames), spec)
            changed = np.any(out.frames != frames, axis=1).sum()
            assert changed == expected, (kind, mode, ratio)
            if kind == FULL_MISSING:
                zero_rows = np.all(out.frames == 0.0, axis=1).sum()
                assert zero_rows == expected
    _report("criterion 6: shape/impairment contracts", t0, 30.0)


def test_07_metric_identities():
    t0 = time.perf_counter()
    catalog = make_synthetic_catalog(
        n_speakers=2, clips_per_speaker=1, duration_s=2.0, seed=7
    )
    y = catalog[0].clip
    assert abs(stoi(y, y) - 1.0) < 1e-6
    assert abs(speech_bert_score(y, y, SYNTH8) - 1.0) < 1e-6
    rng = np.random.default_rng(7)
    x = AudioClip(rng.standard_normal(16000), 16000)
    assert si_sdri(x, y.samples[:16000], x) == 0.0
    _report("criterion 7: metric identities", t0, 30.0)


class _OneClipData:
    def __init__(self):
        rng = np.random.default_rng(0)
        self.mixtures = torch.tensor(0.1 * rng.standard_normal((1, 16000)),
                                     dtype=torch.float32)
        self.targets = torch.tensor(0.1 * rng.standard_normal((1, 16000)),
                                    dtype=torch.float32)
        self.visuals = torch.tensor(rng.standard_normal((1, 25, 8)),
                                    dtype=torch.float32)
        self.transcripts = ["ba de"]

    def __len__(self):
        return 1


def test_08_training_protocol(tmp_path):
    t0 = time.perf_counter()
    toy = BackboneConfig(enc_kernel=8, enc_stride=4, model_dim=16, n_blocks=1,
                         chunk_len=25, n_heads=2, visual_dim=8, seed=0)
    data = _OneClipData()

    # scripted validator: halve on the 3rd non-improving epoch, stop on the 6th
    vals = iter([1.0] + [0.5] * 20)
    model = init_params(toy)
    _, state, history = train_stage(
        model, data, data, StageConfig(stage=1, lr=1e-3, max_epochs=50),
        validate_fn=lambda m: next(vals),
    )
    streaks = [h["streak"] for h in history]
    lrs = [h["lr"] for h in history]
    assert len(history) == 7 and streaks[-1] == 6
    assert lrs[:3] == [1e-3] * 3 and abs(lrs[3] - 5e-4) < 1e-12

    # a short stage-2 run must leave the knowledge map untouched
    def digest():
        w, b = _synthetic_map(SYNTH8)
        return (w.numpy().tobytes(), b.numpy().tobytes())

    before = digest()
    model = init_params(toy)
    train_stage(
        model, data, data,
        StageConfig(stage=2, constraint_kind="pslm_mse", max_epochs=2,
                    max_steps=2, patience_stop=100, patience_halve=99),
        knowledge=SYNTH8, from_checkpoint=True,
    )
    assert digest() == before

    adapters = AdapterPair(8, 8, hidden_dim=4, proj_dim=4)
    save_checkpoint(tmp_path / "infer.ltse", model, adapters=None)
    save_checkpoint(tmp_path / "full.ltse", model, adapters=adapters)
    assert load_checkpoint(tmp_path / "infer.ltse")[2] is None
    assert load_checkpoint(tmp_path / "full.ltse")[2]
    _report("criterion 8: training protocol", t0, 60.0)


def test_09_end_to_end_smoke_trend(tmp_path):
    """Stage 1 gains >= 3 dB of training loss in <= 200 steps; stage 2 with the
    feature-matching constraint recovers >= 20% of validation constraint loss
    without losing more than 0.5 dB of validation SI-SDR."""
    t0 = time.perf_counter()
    catalog = make_synthetic_catalog(
        n_speakers=2, clips_per_speaker=2, duration_s=2.0, seed=0
    )
    p_tr = write_dataset(build_manifest(catalog, 16, 1.0, (0.0, 5.0), 1),
                         catalog, tmp_path / "train", visual_dim=8)
    p_va = write_dataset(build_manifest(catalog, 8, 1.0, (0.0, 5.0), 2),
                         catalog, tmp_path / "val", visual_dim=8)
    train_data = LoadedDataset(load_manifest(p_tr), tmp_path / "train")
    val_data = LoadedDataset(load_manifest(p_va), tmp_path / "val")
    cfg = BackboneConfig(enc_kernel=16, enc_stride=8, model_dim=32, n_blocks=1,
                         chunk_len=25, n_heads=4, visual_dim=8, seed=0)
    model = init_params(cfg)

    def train_si_sdr_loss(m):
        m.eval()
        with torch.no_grad():
            est = m(train_data.mixtures, train_data.visuals)
            v = si_sdr_loss(est.double(), train_data.targets.double()).item()
        m.train()
        return v

    def val_l_lc(m):
        m.eval()
        with torch.no_grad():
            est = m(val_data.mixtures, val_data.visuals)
            v = constraint_term(est, val_data.targets, val_data.transcripts,
                                "pslm_mse", SYNTH8).item()
        m.train()
        return v

    initial = train_si_sdr_loss(model)
    stage1 = StageConfig(stage=1, lr=1e-2, batch_size=4, max_epochs=1000,
                         max_steps=100, patience_stop=1000, patience_halve=999,
                         seed=0)
    model, _, history = train_stage(model, train_data, val_data, stage1)
    drop = initial - history[-1]["train_l_sisdr"]
    assert drop >= 3.0, f"stage-1 training loss dropped only {drop:.2f} dB"

    lc_before = val_l_lc(model)
    sisdr_before = validate(model, val_data)
    stage2 = StageConfig(stage=2, constraint_kind="pslm_mse", lr=1e-2,
                         batch_size=4, max_epochs=1000, max_steps=200,
                         patience_stop=1000, patience_halve=999, seed=0)
    model, _, _ = train_stage(model, train_data, val_data, stage2,
                              knowledge=SYNTH8, from_checkpoint=True)
    lc_after = val_l_lc(model)
    sisdr_after = validate(model, val_data)
    rel_drop = 1.0 - lc_after / lc_before
    degradation = sisdr_before - sisdr_after
    assert rel_drop >= 0.20, f"val constraint loss dropped only {rel_drop:.1%}"
    assert degradation < 0.5, f"val SI-SDR degraded {degradation:.2f} dB"
    _report("criterion 9: end-to-end smoke trend", t0, 600.0)


def test_10_determinism(tmp_path):
    t0 = time.perf_counter()
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli_main(["simulate", "--synthetic", "--out", str(out),
                        "--count", "4", "--duration", "1", "--seed", "9",
                        "--speakers", "4", "--clips-per-speaker", "2",
                        "--visual-dim", "8"])
        assert code == 0
        dirs.append(out)
    a, b = dirs
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    cfg = BackboneConfig(enc_kernel=8, enc_stride=4, model_dim=16, n_blocks=1,
                         chunk_len=25, n_heads=2, visual_dim=8, seed=3)
    m1, m2 = init_params(cfg), init_params(cfg)
    for k, v in m1.state_dict().items():
        assert v.numpy().tobytes() == m2.state_dict()[k].numpy().tobytes(), k
    _report("criterion 10: determinism", t0, 60.0)
