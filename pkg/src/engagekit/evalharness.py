"""Leave-2-participants-out evaluation: folds, training, baselines, statistics.

Participants are shuffled per repeat and paired off; fold k tests on pair k,
validates on the next pair, and trains on the remaining 16. Training uses
Adam with batches of 256 for at most 50 epochs, stopping after 5 epochs
without a strict validation-accuracy improvement and restoring the best
epoch's weights. Accuracies are aggregated over all folds with a normal 95%
confidence interval, and configurations are compared pairwise with an exact
two-tailed Wilcoxon signed-rank test matched on fold plans, Bonferroni
corrected.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from . import models, nn
from .corpus import DataError, LAYOUT_MAPS, read_feature_file
from .models import ModelConfig, make_context, model_inputs
from .preprocess import WindowSpec, frame_indices, read_windows_file
from .timecond import Strategy

# spawn-key namespaces so fold shuffles and training streams never collide
_KEY_FOLDS = 101
_KEY_TRAIN = 202

DEFAULT_PARTICIPANTS = 20
Z_95 = 1.96


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

class WindowDataset:
    """Column store over all labeled windows, frames pre-pooled to 512."""

    def __init__(self, participant_ids, labels, t_levels, t_starts, gamepad, frames_pooled):
        n = len(labels)
        self.participant_ids = np.asarray(participant_ids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.t_levels = np.asarray(t_levels, dtype=np.int64)
        self.t_starts = np.asarray(t_starts, dtype=np.float64)
        self.gamepad = np.asarray(gamepad, dtype=np.float64)
        self.frames_pooled = np.asarray(frames_pooled, dtype=np.float64)
        for arr in (self.participant_ids, self.t_levels, self.t_starts,
                    self.gamepad, self.frames_pooled):
            if len(arr) != n:
                raise ValueError("dataset columns disagree on window count")
        self._by_pid = {}
        for pid in np.unique(self.participant_ids):
            self._by_pid[str(pid)] = np.where(self.participant_ids == pid)[0]

    def __len__(self):
        return len(self.labels)

    @property
    def participants(self):
        return sorted(self._by_pid)

    def indices_for(self, pids) -> np.ndarray:
        missing = [p for p in pids if p not in self._by_pid]
        if missing:
            raise DataError(f"participants not in dataset: {missing}")
        if not pids:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([self._by_pid[p] for p in pids]))

    def batch(self, idx, input_keys):
        inputs = {}
        if "gamepad" in input_keys:
            inputs["gamepad"] = self.gamepad[idx]
        if "frames" in input_keys:
            inputs["frames"] = self.frames_pooled[idx]
        return inputs, self.t_levels[idx], self.labels[idx]

    @classmethod
    def from_windows_dir(cls, windows_dir, corpus_dir) -> "WindowDataset":
        """Load the windows file and pool each window's frames from the
        referenced feature containers."""
        meta, cols = read_windows_file(windows_dir)
        spec = WindowSpec(**meta["spec"])
        corpus_dir = Path(corpus_dir)
        n = len(cols["label"])
        pooled = None
        for pid, sess in sorted(meta["sessions"].items()):
            rows = np.where(cols["participant_id"] == pid)[0]
            if rows.size == 0:
                continue
            if not sess.get("features_path"):
                raise DataError(f"windows meta lacks a features_path for {pid}")
            stream = read_feature_file(corpus_dir / sess["features_path"])
            vecs = stream.frames.astype(np.float64)
            if stream.layout == LAYOUT_MAPS:
                vecs = nn.spatial_max_pool(vecs)
            if pooled is None:
                pooled = np.empty((n, vecs.shape[1]), dtype=np.float64)
            starts = cols["t_start"][rows] - spec.stimulus_shift_s
            for chunk in _chunks(rows.size, 1024):
                sel = rows[chunk]
                idx_mat = np.stack([frame_indices(stream, s, spec)
                                    for s in starts[chunk]])
                pooled[sel] = vecs[idx_mat].mean(axis=1)
        if pooled is None:
            raise DataError("windows file contains no windows")
        return cls(cols["participant_id"], cols["label"], cols["t_level"],
                   cols["t_start"], cols["gamepad"], pooled)

    @classmethod
    def from_session_windows(cls, results, streams, spec: WindowSpec) -> "WindowDataset":
        """In-memory variant: results are SessionWindows, streams maps
        participant id to its FrameFeatureStream."""
        pids, labels, levels, starts, feats, pooled = [], [], [], [], [], []
        for res in results:
            stream = streams[res.participant_id]
            vecs = stream.frames.astype(np.float64)
            if stream.layout == LAYOUT_MAPS:
                vecs = nn.spatial_max_pool(vecs)
            for w in res.windows:
                pids.append(w.participant_id)
                labels.append(w.label.value)
                levels.append(w.t_level)
                starts.append(w.t_start)
                feats.append(w.gamepad)
                idx = frame_indices(stream, w.t_start - spec.stimulus_shift_s, spec)
                pooled.append(vecs[idx].mean(axis=0))
        return cls(np.array(pids), labels, levels, starts,
                   np.array(feats), np.array(pooled))


def _chunks(n, size):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


# ---------------------------------------------------------------------------
# fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    repeat_index: int
    fold_index: int
    train: tuple
    validation: tuple
    test: tuple

    def key(self):
        return (self.repeat_index, self.fold_index, self.test, self.validation)


def make_folds(participant_ids, n_repeats: int = 4, seed: int = 0,
               expected_participants=DEFAULT_PARTICIPANTS):
    """Fold plans for n_repeats reshuffles of the leave-2-out protocol."""
    ids = sorted(str(p) for p in participant_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate participant ids")
    if expected_participants is not None and len(ids) != expected_participants:
        raise DataError(f"expected {expected_participants} participants, got {len(ids)}; "
                        "set the participants option to match the corpus")
    if len(ids) % 2 != 0 or len(ids) < 6:
        raise DataError(f"leave-2-out needs an even participant count of at least 6, got {len(ids)}")
    n_pairs = len(ids) // 2
    plans = []
    for r in range(n_repeats):
        rng = nn.make_rng(seed, _KEY_FOLDS, r)
        order = [ids[i] for i in rng.permutation(len(ids))]
        pairs = [tuple(sorted(order[2 * k:2 * k + 2])) for k in range(n_pairs)]
        for k in range(n_pairs):
            test = pairs[k]
            validation = pairs[(k + 1) % n_pairs]
            train = tuple(sorted(set(ids) - set(test) - set(validation)))
            plans.append(FoldPlan(repeat_index=r, fold_index=k, train=train,
                                  validation=validation, test=test))
    return plans


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.005
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5


class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record one epoch's validation score; returns True when training
        should stop. Call with epochs starting at 1."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class FoldResult:
    modality: str
    conditioning: str
    repeat_index: int
    fold_index: int
    test: tuple
    validation: tuple
    test_accuracy: float
    baseline_accuracy: float
    epochs_run: int
    best_epoch: int
    best_val_accuracy: float
    n_test: int
    predictions: np.ndarray = field(default=None, repr=False, compare=False)

    def plan_key(self):
        return (self.repeat_index, self.fold_index, self.test, self.validation)


def evaluate_accuracy(net, config: ModelConfig, dataset: WindowDataset, idx,
                      chunk_size: int = 4096):
    """EVAL-mode accuracy over the given window indices; returns (acc, preds)."""
    keys = model_inputs(config)
    preds = np.empty(len(idx), dtype=np.int64)
    for chunk in _chunks(len(idx), chunk_size):
        inputs, t_levels, _ = dataset.batch(idx[chunk], keys)
        ctx = make_context(config, t_levels, mode="eval")
        probs, _ = net.forward(inputs, ctx)
        preds[chunk] = probs.argmax(axis=1)
    acc = float(np.mean(preds == dataset.labels[idx]))
    return acc, preds


def majority_baseline(plan: FoldPlan, dataset: WindowDataset) -> float:
    """Predict the training set's majority class everywhere; ties predict HIGH."""
    train_labels = dataset.labels[dataset.indices_for(plan.train)]
    test_labels = dataset.labels[dataset.indices_for(plan.test)]
    n_high = int((train_labels == 1).sum())
    n_low = int((train_labels == 0).sum())
    majority = 1 if n_high >= n_low else 0
    return float(np.mean(test_labels == majority))


def train_fold(plan: FoldPlan, config: ModelConfig, dataset: WindowDataset,
               settings: TrainSettings = TrainSettings(), rng=None):
    """Train one configuration on one fold; returns (FoldResult, network)."""
    for a, b in (("train", "validation"), ("train", "test"), ("validation", "test")):
        if set(getattr(plan, a)) & set(getattr(plan, b)):
            raise DataError(f"fold leaks participants between {a} and {b}: {plan}")
    rng = rng or nn.make_rng(config.seed, _KEY_TRAIN, plan.repeat_index, plan.fold_index)
    tr_idx = dataset.indices_for(plan.train)
    va_idx = dataset.indices_for(plan.validation)
    te_idx = dataset.indices_for(plan.test)
    tr_labels = dataset.labels[tr_idx]
    for cls, name in ((0, "LOW"), (1, "HIGH")):
        if not np.any(tr_labels == cls):
            raise DataError(f"fold {plan.repeat_index}/{plan.fold_index} aborted: "
                            f"training set has no {name} windows")

    net = models.build_model(config, rng)
    adam = nn.Adam(net.parameters(), lr=settings.lr)
    keys = model_inputs(config)
    stopper = EarlyStopper(settings.patience)
    best_state = net.state_copy()
    epochs_run = 0
    for epoch in range(1, settings.max_epochs + 1):
        epochs_run = epoch
        perm = rng.permutation(tr_idx.size)
        for chunk in _chunks(perm.size, settings.batch_size):
            batch_idx = tr_idx[perm[chunk]]
            inputs, t_levels, labels = dataset.batch(batch_idx, keys)
            ctx = make_context(config, t_levels, mode="train", rng=rng)
            _, tape = net.forward(inputs, ctx)
            grads = net.backward(tape, labels, ctx)
            adam.step(grads)
        val_acc, _ = evaluate_accuracy(net, config, dataset, va_idx)
        improved = val_acc > stopper.best_score
        stop = stopper.update(epoch, val_acc)
        if improved:
            best_state = net.state_copy()
        if stop:
            break
    net.load_state(best_state)
    test_acc, preds = evaluate_accuracy(net, config, dataset, te_idx)
    result = FoldResult(
        modality=config.modality, conditioning=config.conditioning,
        repeat_index=plan.repeat_index, fold_index=plan.fold_index,
        test=plan.test, validation=plan.validation,
        test_accuracy=test_acc, baseline_accuracy=majority_baseline(plan, dataset),
        epochs_run=epochs_run, best_epoch=stopper.best_epoch,
        best_val_accuracy=float(stopper.best_score), n_test=int(te_idx.size),
        predictions=preds)
    return result, net


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def _exact_wplus_distribution(double_ranks):
    """Counts of sign assignments per achievable 2*W+ value (exact, via
    subset-sum counting; identical to enumerating all 2^n sign patterns)."""
    total = int(double_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in double_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b, exact_limit: int = 25) -> float:
    """Two-tailed paired Wilcoxon signed-rank p-value.

    Zero differences are dropped (p = 1 if none remain). Exact distribution
    for n <= exact_limit; normal approximation with tie correction above.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon needs two equal-length 1-d samples")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))  # midranks for ties
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_limit:
        double_ranks = np.rint(2.0 * ranks).astype(np.int64)
        counts = _exact_wplus_distribution(double_ranks)
        total_patterns = float(2.0 ** n)
        w2 = int(round(2.0 * w_plus))
        p_le = counts[:w2 + 1].sum() / total_patterns
        p_ge = counts[w2:].sum() / total_patterns
        return float(min(1.0, 2.0 * min(p_le, p_ge)))
    mean_w = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    var_w = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var_w <= 0:
        return 1.0
    z = (w_plus - mean_w) / np.sqrt(var_w)
    return float(2.0 * ndtr(-abs(z)))


def bonferroni_adjust(p_values, alpha: float = 0.05):
    """Returns (adjusted p-values, significance flags) for m comparisons."""
    m = len(p_values)
    if m < 1:
        raise ValueError("need at least one p-value")
    adjusted = [min(1.0, m * p) for p in p_values]
    flags = [p < alpha / m for p in p_values]
    return adjusted, flags


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------

@dataclass
class ConfigStats:
    label: str
    mean: float
    ci_half_width: float
    best: float
    accuracies: list


@dataclass
class EvalReport:
    configs: "OrderedDict[str, ConfigStats]"
    baseline: ConfigStats
    pairs: list   # (label_a, label_b, p, adjusted_p, significant)
    n_folds: int


def _stats(label, accs) -> ConfigStats:
    accs = np.asarray(accs, dtype=np.float64)
    mean = float(accs.mean())
    half = float(Z_95 * accs.std(ddof=0) / np.sqrt(accs.size))
    return ConfigStats(label=label, mean=mean, ci_half_width=half,
                       best=float(accs.max()), accuracies=[float(x) for x in accs])


def aggregate(results_by_config: "OrderedDict[str, list]", alpha: float = 0.05) -> EvalReport:
    """Mean/CI/best per configuration plus the pairwise significance table.

    All configurations must have been evaluated on identical fold plans,
    in the same order; otherwise pairing is impossible and this raises.
    """
    if not results_by_config:
        raise ValueError("no results to aggregate")
    labels = list(results_by_config)
    reference = [r.plan_key() for r in results_by_config[labels[0]]]
    if not reference:
        raise ValueError("empty fold list")
    for label in labels[1:]:
        keys = [r.plan_key() for r in results_by_config[label]]
        if keys != reference:
            raise DataError(f"fold plans of {label!r} do not match {labels[0]!r}; "
                            "cannot pair folds for significance testing")
    configs = OrderedDict()
    for label in labels:
        configs[label] = _stats(label, [r.test_accuracy for r in results_by_config[label]])
    baseline = _stats("baseline", [r.baseline_accuracy for r in results_by_config[labels[0]]])

    pairs = []
    raw = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            a = configs[labels[i]].accuracies
            b = configs[labels[j]].accuracies
            raw.append((labels[i], labels[j], wilcoxon_signed_rank(a, b)))
    if raw:
        adjusted, flags = bonferroni_adjust([p for _, _, p in raw], alpha)
        pairs = [(a, b, p, adj, sig)
                 for (a, b, p), adj, sig in zip(raw, adjusted, flags)]
    return EvalReport(configs=configs, baseline=baseline, pairs=pairs,
                      n_folds=len(reference))


FOLD_CSV_HEADER = ("config,modality,conditioning,repeat,fold,test,validation,"
                   "n_test,test_accuracy,baseline_accuracy,epochs_run,best_epoch,"
                   "best_val_accuracy")


def config_label(modality: str, conditioning: str) -> str:
    return f"{modality}-{conditioning}"


def write_fold_records(results_by_config, path):
    """One CSV row per fold, full float precision, deterministic order."""
    with open(path, "w") as f:
        f.write(FOLD_CSV_HEADER + "\n")
        for label, results in results_by_config.items():
            for r in results:
                f.write(",".join([
                    label, r.modality, r.conditioning,
                    str(r.repeat_index), str(r.fold_index),
                    "|".join(r.test), "|".join(r.validation),
                    str(r.n_test), repr(r.test_accuracy), repr(r.baseline_accuracy),
                    str(r.epochs_run), str(r.best_epoch), repr(r.best_val_accuracy),
                ]) + "\n")


def read_fold_records(path):
    """Parse a folds CSV back into results_by_config for re-aggregation."""
    results = OrderedDict()
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != FOLD_CSV_HEADER:
            raise DataError(f"{path}: unexpected folds header")
        for lineno, line in enumerate(f, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != 13:
                raise DataError(f"{path}:{lineno}: expected 13 columns")
            result = FoldResult(
                modality=cells[1], conditioning=cells[2],
                repeat_index=int(cells[3]), fold_index=int(cells[4]),
                test=tuple(cells[5].split("|")), validation=tuple(cells[6].split("|")),
                n_test=int(cells[7]), test_accuracy=float(cells[8]),
                baseline_accuracy=float(cells[9]), epochs_run=int(cells[10]),
                best_epoch=int(cells[11]), best_val_accuracy=float(cells[12]))
            results.setdefault(cells[0], []).append(result)
    return results


def render_report(report: EvalReport) -> str:
    """Human-readable accuracy grid (modality rows, conditioning columns)."""
    modalities, conditionings = [], []
    for label in report.configs:
        modality, _, conditioning = label.rpartition("-")
        if modality not in modalities:
            modalities.append(modality)
        if conditioning not in conditionings:
            conditionings.append(conditioning)
    lines = []
    lines.append(f"Mean test accuracy over {report.n_folds} folds "
                 "(95% CI half-width) [best fold]")
    cell = "{:>26}"
    lines.append("  ".join(["{:<10}".format("model")] +
                           [cell.format(c) for c in conditionings]))
    for modality in modalities:
        row = ["{:<10}".format(modality)]
        for conditioning in conditionings:
            stats = report.configs.get(config_label(modality, conditioning))
            if stats is None:
                row.append(cell.format("-"))
            else:
                row.append(cell.format(
                    f"{stats.mean:.3f} ({stats.ci_half_width:.3f}) [{stats.best:.3f}]"))
        lines.append("  ".join(row))
    b = report.baseline
    lines.append(f"{'baseline':<10}  " +
                 cell.format(f"{b.mean:.3f} ({b.ci_half_width:.3f}) [{b.best:.3f}]"))
    lines.append("")
    if report.pairs:
        m = len(report.pairs)
        lines.append(f"Pairwise two-tailed Wilcoxon signed-rank, Bonferroni over {m} pairs "
                     "(alpha 0.05):")
        for a, bb, p, adj, sig in report.pairs:
            mark = "significant" if sig else "n.s."
            lines.append(f"  {a:<14} vs {bb:<14} p={p:.6f}  adj={adj:.6f}  {mark}")
    return "\n".join(lines) + "\n"


def report_to_dict(report: EvalReport) -> dict:
    return {
        "n_folds": report.n_folds,
        "configs": {label: {"mean": s.mean, "ci_half_width": s.ci_half_width,
                            "best": s.best, "accuracies": s.accuracies}
                    for label, s in report.configs.items()},
        "baseline": {"mean": report.baseline.mean,
                     "ci_half_width": report.baseline.ci_half_width,
                     "best": report.baseline.best,
                     "accuracies": report.baseline.accuracies},
        "pairs": [{"a": a, "b": b, "p": p, "adjusted_p": adj, "significant": sig}
                  for a, b, p, adj, sig in report.pairs],
    }


def write_report(report: EvalReport, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.txt", "w") as f:
        f.write(render_report(report))
    with open(out_dir / "report.json", "w") as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# experiment sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    modalities: tuple = ("gamepad", "frames", "fusion")
    conditionings: tuple = ("none", "sll", "ssll", "ssal")
    seed: int = 0
    repeats: int = 4
    epochs: int = 50
    patience: int = 5
    lr: float = 0.005
    batch: int = 256
    participants: int = DEFAULT_PARTICIPANTS
    jobs: int = 1
    embed_dim: int = 512
    embed_base: float = 10000.0

    def settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, batch_size=self.batch,
                             max_epochs=self.epochs, patience=self.patience)

    def model_configs(self):
        out = OrderedDict()
        for modality in self.modalities:
            for conditioning in self.conditionings:
                label = config_label(modality, conditioning)
                out[label] = ModelConfig(modality=modality, conditioning=conditioning,
                                         seed=self.seed, embed_dim=self.embed_dim,
                                         embed_base=self.embed_base)
        return out


_WORKER_DATASET = None


def _worker_init(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_task(task):
    label, config, plan, settings, seed, mod_idx, cond_idx = task
    rng = nn.make_rng(seed, _KEY_TRAIN, mod_idx, cond_idx,
                      plan.repeat_index, plan.fold_index)
    result, _ = train_fold(plan, config, _WORKER_DATASET, settings, rng)
    result.predictions = None  # keep the parent process lean
    return label, result


def run_experiment(dataset: WindowDataset, exp: ExperimentConfig,
                   plans=None, progress=None):
    """Train every configuration on every fold; returns results_by_config.

    Results are deterministic for a fixed seed regardless of the job count:
    each task derives its generator from (seed, modality, conditioning,
    repeat, fold) alone.
    """
    if plans is None:
        plans = make_folds(dataset.participants, n_repeats=exp.repeats, seed=exp.seed,
                           expected_participants=exp.participants)
    settings = exp.settings()
    tasks = []
    for label, config in exp.model_configs().items():
        mod_idx = models.MODALITIES.index(config.modality)
        cond_idx = [s.value for s in Strategy].index(Strategy.parse(config.conditioning).value)
        for plan in plans:
            tasks.append((label, config, plan, settings, exp.seed, mod_idx, cond_idx))

    results_by_config = OrderedDict((label, []) for label in exp.model_configs())
    if exp.jobs > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs, initializer=_worker_init,
                                 initargs=(dataset,)) as pool:
            for i, (label, result) in enumerate(pool.map(_run_task, tasks, chunksize=1)):
                results_by_config[label].append(result)
                if progress:
                    progress(i + 1, len(tasks), label, result)
    else:
        _worker_init(dataset)
        for i, task in enumerate(tasks):
            label, result = _run_task(task)
            results_by_config[label].append(result)
            if progress:
                progress(i + 1, len(tasks), label, result)
    return results_by_config, plans
