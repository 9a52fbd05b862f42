"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The three training
criteria generate synthetic corpora, serialize them through the real file
formats, and run the evaluation harness on them end to end.
"""

import time

import numpy as np

from engagekit import corpus, nn, synth
from engagekit.corpus import DEFAULT_VOCABULARY
from engagekit.evalharness import (ExperimentConfig, WindowDataset, aggregate,
                                   bonferroni_adjust, run_experiment,
                                   wilcoxon_signed_rank, write_fold_records)
from engagekit.models import (MODALITIES, ModelConfig, build_model, make_context,
                              model_inputs)
from engagekit.preprocess import (Label, WindowSpec, build_windows, gamepad_features,
                                  label_window, segment_windows, write_windows_file)
from engagekit.preprocess import NormalizedTrace

STRATEGIES = ("none", "sll", "ssll", "ssal")

# frozen synthetic presets; seeds pin the corpora byte for byte
NULL_PRESET = synth.SynthConfig(n_participants=20, duration_s=360.0,
                                combat_segment_s=30.0, effect_strength=0.0,
                                noise_sd=1.0, trace_noise=0.08, seed=31)
SIGNAL_PRESET = synth.SynthConfig(n_participants=20, duration_s=480.0,
                                  combat_segment_s=40.0, effect_strength=1.2,
                                  noise_sd=0.8, modality_dropout=0.15,
                                  trace_noise=0.05, seed=11)
DRIFT_PRESET = synth.SynthConfig(n_participants=20, duration_s=1800.0,
                                 combat_segment_s=45.0, effect_strength=1.2,
                                 noise_sd=0.8, time_drift=1.0,
                                 trace_noise=0.05, seed=21)

JOBS = 2


def report_line(name, ok, detail):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


def corpus_to_dataset(config, root):
    """synth -> on-disk corpus -> windows file -> dataset, all through files."""
    corpus_dir = root / "corpus"
    windows_dir = root / "windows"
    synth.write_corpus(config, corpus_dir)
    spec = WindowSpec()
    results = []
    for manifest in sorted(corpus_dir.glob("*/session.manifest")):
        session = corpus.read_session(manifest)
        res = build_windows(session, spec)
        res.features_path = f"{session.participant_id}/features.bin"
        results.append(res)
    write_windows_file(results, spec, DEFAULT_VOCABULARY, windows_dir)
    return WindowDataset.from_windows_dir(windows_dir, corpus_dir)


# ---------------------------------------------------------------------------
# criterion: gradient oracle
# ---------------------------------------------------------------------------

def test_gradient_oracle(tmp_path):
    start = time.time()
    small = synth.SynthConfig(n_participants=2, duration_s=160.0, combat_segment_s=20.0,
                              effect_strength=1.0, noise_sd=1.0, seed=2)
    ds = corpus_to_dataset(small, tmp_path)
    rng = nn.make_rng(99)
    batch = rng.choice(len(ds), size=8, replace=False)
    gamepad_x = ds.gamepad[batch]
    frames_x = ds.frames_pooled[batch]
    labels = ds.labels[batch]
    # short desk sessions sit in one 20-minute block; spread the levels so the
    # conditioning sees several embedding rows, as hour-long sessions would
    t_levels = rng.integers(1, 4, size=8)

    h = 1e-4
    tol = 1e-3
    worst = {}
    for modality in MODALITIES:
        for conditioning in STRATEGIES:
            config = ModelConfig(modality=modality, conditioning=conditioning, seed=5)
            net = build_model(config)
            for p in net.parameters().values():
                fan = p.shape[-1] if p.ndim > 1 else 1
                p[...] = rng.normal(scale=0.5 / np.sqrt(fan), size=p.shape)
            inputs = {}
            if "gamepad" in model_inputs(config):
                inputs["gamepad"] = gamepad_x
            if "frames" in model_inputs(config):
                inputs["frames"] = frames_x

            def loss():
                ctx = make_context(config, t_levels, mode="train", rng=nn.make_rng(7))
                probs, tape = net.forward(inputs, ctx)
                return nn.cross_entropy(probs, labels), tape, ctx

            _, tape, ctx = loss()
            grads = net.backward(tape, labels, ctx)
            max_err = 0.0
            picker = nn.make_rng(13)
            for name, p in net.parameters().items():
                flat = p.ravel()
                if flat.size <= 64:
                    chosen = np.arange(flat.size)
                else:
                    chosen = picker.choice(flat.size, size=64, replace=False)
                for i in chosen:
                    orig = flat[i]
                    flat[i] = orig + h
                    lp = loss()[0]
                    flat[i] = orig - h
                    lm = loss()[0]
                    flat[i] = orig
                    fd = (lp - lm) / (2 * h)
                    ga = grads[name].ravel()[i]
                    err = abs(fd - ga) / max(abs(fd), abs(ga), 1e-6)
                    max_err = max(max_err, err)
            worst[f"{modality}-{conditioning}"] = max_err
            assert max_err < tol, f"{modality}-{conditioning}: rel err {max_err:.2e}"
    elapsed = time.time() - start
    overall = max(worst.values())
    report_line("gradient-oracle",
                overall < tol and elapsed < 120.0,
                f"12 configurations, max rel err {overall:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion: identity at initialization
# ---------------------------------------------------------------------------

def test_identity_at_init():
    rng = nn.make_rng(1)
    all_equal = True
    checked = 0
    for modality in MODALITIES:
        base = build_model(ModelConfig(modality=modality, conditioning="none", seed=8))
        inputs = {}
        if "gamepad" in model_inputs(modality):
            inputs["gamepad"] = rng.normal(size=(100, 31))
        if "frames" in model_inputs(modality):
            inputs["frames"] = rng.normal(size=(100, 512))
        t_levels = rng.integers(1, 4, size=100)
        base_cfg = ModelConfig(modality=modality, conditioning="none", seed=8)
        probs_base, _ = base.forward(inputs, make_context(base_cfg, t_levels))
        for conditioning in ("sll", "ssll", "ssal"):
            config = ModelConfig(modality=modality, conditioning=conditioning, seed=8)
            net = build_model(config)  # projections are zero at init
            probs, _ = net.forward(inputs, make_context(config, t_levels))
            checked += 1
            if probs.tobytes() != probs_base.tobytes():
                all_equal = False
    report_line("identity-at-init", all_equal,
                f"{checked} strategy/modality pairs bitwise equal on 100 inputs each")


# ---------------------------------------------------------------------------
# criterion: preprocessing oracle
# ---------------------------------------------------------------------------

def test_preprocessing_oracle():
    rng = np.random.default_rng(300)
    # window counts against direct enumeration
    for _ in range(50):
        duration = float(rng.uniform(5.0, 4000.0))
        spec = WindowSpec(window_s=float(rng.uniform(2, 15)),
                          stride_s=float(rng.uniform(0.25, 4)),
                          stimulus_shift_s=float(rng.uniform(0.05, 1.9)))
        count, k = 0, 0
        while spec.stimulus_shift_s + k * spec.stride_s + spec.window_s <= duration:
            count, k = count + 1, k + 1
        assert len(segment_windows(duration, spec)) == count

    # gamepad features against a naive per-event recount
    spec = WindowSpec()
    actions = DEFAULT_VOCABULARY.actions
    for _ in range(20):
        events, t = [], 0.0
        for _ in range(250):
            t += float(rng.uniform(0, 0.25))
            k = int(rng.integers(0, 7))
            pressed = (frozenset(rng.choice(actions, size=k, replace=False))
                       if k else frozenset())
            events.append(corpus.GamepadEvent(t=t, pressed=pressed))
        start = float(rng.uniform(0, max(t - spec.window_s, 0.1)))
        expected = np.zeros(31)
        for e in events:
            if start <= e.t < start + spec.window_s:
                if not e.pressed:
                    expected[25] += 1
                else:
                    for name in e.pressed:
                        expected[DEFAULT_VOCABULARY.index(name)] += 1
                    if len(e.pressed) >= 2:
                        expected[26 + len(e.pressed) - 2] += 1
        expected /= spec.window_s
        np.testing.assert_allclose(gamepad_features(events, start, spec), expected,
                                   atol=1e-12)

    # label partition on 1000 random windows
    for _ in range(1000):
        norm = NormalizedTrace(values=rng.random(400), hz=30.0)
        mu = float(rng.random())
        eps = float(rng.uniform(0, 0.45))
        label, e_mean = label_window(norm, 0.0, 10.0, mu, eps)
        members = [e_mean > mu + eps, e_mean < mu - eps, label is Label.AMBIGUOUS]
        assert sum(members) == 1
        assert (label is Label.HIGH) == members[0]
        assert (label is Label.LOW) == members[1]
    report_line("preprocessing-oracle", True,
                "50 window-count formulas, 20 recounts, 1000 label partitions")


# ---------------------------------------------------------------------------
# criterion: statistics oracle
# ---------------------------------------------------------------------------

def enumerate_wilcoxon(a, b):
    """Oracle: exact enumeration of all 2^n sign assignments, vectorized."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    from scipy.stats import rankdata
    ranks = rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    masks = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    w_all = masks @ ranks
    total = float(2 ** n)
    p_le = np.count_nonzero(w_all <= w_obs + 1e-12) / total
    p_ge = np.count_nonzero(w_all >= w_obs - 1e-12) / total
    return min(1.0, 2.0 * min(p_le, p_ge))


def test_statistics_oracle():
    rng = np.random.default_rng(400)
    n_checked = 0
    for trial in range(200):
        n = trial % 12 + 1  # cycle so every size up to 12 is covered
        a = rng.normal(size=n)
        b = a + rng.normal(size=n)
        if trial % 3 == 0 and n >= 2:  # force ties in |d| and zero differences
            b[0] = a[0]
            if n >= 4:
                b[3] = a[3] + (a[1] - b[1])
        fast = wilcoxon_signed_rank(a, b)
        slow = enumerate_wilcoxon(a, b)
        assert abs(fast - slow) < 1e-12, (n, fast, slow)
        n_checked += 1

    for _ in range(100):
        m = int(rng.integers(1, 80))
        ps = rng.random(m)
        adjusted, flags = bonferroni_adjust(ps)
        for p, adj, flag in zip(ps, adjusted, flags):
            assert flag == (p < 0.05 / m)
            assert adj == min(1.0, m * p)
    report_line("statistics-oracle", True,
                f"{n_checked} exact Wilcoxon agreements at 1e-12, Bonferroni exact")


# ---------------------------------------------------------------------------
# criterion: null-effect control
# ---------------------------------------------------------------------------

def test_null_effect_control(tmp_path):
    start = time.time()
    ds = corpus_to_dataset(NULL_PRESET, tmp_path)
    exp = ExperimentConfig(seed=NULL_PRESET.seed, repeats=1, participants=20, jobs=JOBS)
    results, _ = run_experiment(ds, exp)
    report = aggregate(results)
    base = report.baseline.mean
    deviations = {label: abs(s.mean - base) for label, s in report.configs.items()}
    worst_label = max(deviations, key=deviations.get)
    ok = all(v <= 0.03 for v in deviations.values())
    report_line("null-effect-control", ok,
                f"12 configurations within 3 points of baseline {base:.3f}; worst "
                f"{worst_label} at {deviations[worst_label]:.4f}, "
                f"{time.time() - start:.0f}s")


# ---------------------------------------------------------------------------
# criterion: signal recovery
# ---------------------------------------------------------------------------

def test_signal_recovery(tmp_path):
    start = time.time()
    ds = corpus_to_dataset(SIGNAL_PRESET, tmp_path)
    exp = ExperimentConfig(modalities=("gamepad", "frames", "fusion"),
                           conditionings=("none",), seed=SIGNAL_PRESET.seed,
                           repeats=1, participants=20, jobs=JOBS)
    results, _ = run_experiment(ds, exp)
    report = aggregate(results)
    fusion = report.configs["fusion-none"].mean
    gamepad = report.configs["gamepad-none"].mean
    frames = report.configs["frames-none"].mean
    ok = fusion >= 0.90 and fusion >= gamepad and fusion >= frames
    report_line("signal-recovery", ok,
                f"fusion {fusion:.4f} >= 0.90, gamepad {gamepad:.4f}, "
                f"frames {frames:.4f}, {time.time() - start:.0f}s")


# ---------------------------------------------------------------------------
# criterion: drift recovery
# ---------------------------------------------------------------------------

def test_drift_recovery(tmp_path):
    start = time.time()
    ds = corpus_to_dataset(DRIFT_PRESET, tmp_path)
    exp = ExperimentConfig(modalities=("fusion",), conditionings=("none", "ssal"),
                           seed=DRIFT_PRESET.seed, repeats=1, participants=20,
                           jobs=JOBS)
    results, _ = run_experiment(ds, exp)
    report = aggregate(results)
    unconditioned = report.configs["fusion-none"].accuracies
    conditioned = report.configs["fusion-ssal"].accuracies
    margin = float(np.mean(conditioned) - np.mean(unconditioned))
    p = wilcoxon_signed_rank(conditioned, unconditioned)
    ok = margin >= 0.05 and p < 0.05
    report_line("drift-recovery", ok,
                f"ssal {np.mean(conditioned):.4f} vs none {np.mean(unconditioned):.4f}, "
                f"margin {margin:.4f} >= 0.05, Wilcoxon p {p:.5f} < 0.05, "
                f"{time.time() - start:.0f}s")


# ---------------------------------------------------------------------------
# criterion: determinism
# ---------------------------------------------------------------------------

def test_determinism_byte_identical_records(tmp_path):
    small = synth.SynthConfig(n_participants=6, duration_s=240.0, combat_segment_s=25.0,
                              effect_strength=1.0, noise_sd=1.0, seed=17)
    ds = corpus_to_dataset(small, tmp_path)
    exp = ExperimentConfig(modalities=("gamepad", "fusion"),
                           conditionings=("none", "ssal"), seed=17, repeats=2,
                           participants=6, epochs=8, patience=3)
    blobs = []
    for run in ("a", "b"):
        results, _ = run_experiment(ds, exp)
        path = tmp_path / f"folds_{run}.csv"
        write_fold_records(results, path)
        blobs.append(path.read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    report_line("determinism", ok,
                f"two evaluations, {len(blobs[0])} bytes of fold records identical")
