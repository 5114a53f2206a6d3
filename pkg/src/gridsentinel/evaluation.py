"""
Decision rule, detection metrics at timestep, sequence and exact-match
granularity, per-client breakdowns and (tau, m) sweeps.
"""

import logging
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from src.gridsentinel.config import DecisionRule
from src.gridsentinel.encoder import EncoderInputs, encode_batch
from src.gridsentinel.errors import DimensionError, PreconditionError, ReportError

logger = logging.getLogger("gridsentinel.evaluation")

REPORT_FORMAT = "gridsentinel-metrics/1"


# ---------- decisions ----------

def decide_timesteps(p, tau):
    """1 where p >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    return (np.asarray(p) >= tau).astype(np.int64)


def longest_run(y):
    """Length of the longest run of ones per row of a (n, W) 0/1 matrix."""
    y = np.atleast_2d(np.asarray(y, dtype=np.int64))
    run = np.zeros(y.shape[0], dtype=np.int64)
    best = np.zeros(y.shape[0], dtype=np.int64)
    for t in range(y.shape[1]):
        run = (run + 1) * y[:, t]
        best = np.maximum(best, run)
    return best


def decide_sequences(y_hat, m, mode="consecutive"):
    """Sequence flags for a (n, W) matrix of thresholded timesteps."""
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=np.int64))
    if not 1 <= m <= y_hat.shape[1]:
        raise ValueError(f"m must be in [1, {y_hat.shape[1]}], got {m}")
    match mode:
        case "consecutive":
            return (longest_run(y_hat) >= m).astype(np.int64)
        case "any":
            return (y_hat.sum(axis=1) >= m).astype(np.int64)
        case _:
            raise ValueError(f"unknown decision mode {mode!r}")


def check_rule_window(m, window):
    """A sequence rule needs 1 <= m <= W."""
    if not 1 <= m <= window:
        raise PreconditionError(f"rule.m={m} does not fit windows of length {window}; use 1 <= m <= {window}")


def decide_sequence(y_hat, m, mode="consecutive"):
    return int(decide_sequences(np.asarray(y_hat)[None, :], m, mode)[0])


def exact_match(y_hat, y):
    y_hat, y = np.asarray(y_hat), np.asarray(y)
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction {y_hat.shape} and label {y.shape} lengths differ")
    return int(np.array_equal(y_hat, y))


# ---------- counts ----------

def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_arrays(cls, predicted, actual):
        predicted, actual = np.asarray(predicted).ravel(), np.asarray(actual).ravel()
        if actual.size == 0:
            return cls()
        tn, fp, fn, tp = confusion_matrix(actual, predicted, labels=[0, 1]).ravel()
        return cls(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))

    def __add__(self, other):
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self):
        return _ratio(2 * self.precision * self.recall, self.precision + self.recall)

    @property
    def fpr(self):
        return _ratio(self.fp, self.fp + self.tn)

    # normal-class view
    @property
    def precision_normal(self):
        return _ratio(self.tn, self.tn + self.fn)

    @property
    def recall_normal(self):
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def f1_normal(self):
        return _ratio(2 * self.precision_normal * self.recall_normal, self.precision_normal + self.recall_normal)


@dataclass
class Section:
    timestep: Confusion = field(default_factory=Confusion)
    sequence: Confusion = field(default_factory=Confusion)
    exact: int = 0
    windows: int = 0

    def __add__(self, other):
        return Section(self.timestep + other.timestep, self.sequence + other.sequence,
                       self.exact + other.exact, self.windows + other.windows)

    @property
    def exact_match_rate(self):
        return _ratio(self.exact, self.windows)


@dataclass
class MetricsReport:
    rule: DecisionRule
    overall: Section
    clients: dict = field(default_factory=dict)

    # ---------- serialization ----------

    def to_text(self):
        """key=value lines; counts are authoritative, rates are informative."""
        lines = [
            f"format={REPORT_FORMAT}",
            f"rule.tau={self.rule.tau!r}",
            f"rule.m={self.rule.m}",
            f"rule.mode={self.rule.mode}",
        ]
        for prefix, section in [("global", self.overall)] + [(f"client.{c}", s) for c, s in sorted(self.clients.items())]:
            for level in ("timestep", "sequence"):
                counts = getattr(section, level)
                for f in fields(Confusion):
                    lines.append(f"{prefix}.{level}.{f.name}={getattr(counts, f.name)}")
                for rate in ("accuracy", "precision", "recall", "f1", "fpr"):
                    lines.append(f"{prefix}.{level}.rate.{rate}={getattr(counts, rate)!r}")
            lines.append(f"{prefix}.exact={section.exact}")
            lines.append(f"{prefix}.windows={section.windows}")
            lines.append(f"{prefix}.rate.exact_match={section.exact_match_rate!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                values[key] = value
        if values.get("format") != REPORT_FORMAT:
            raise ReportError(f"unsupported metrics format {values.get('format')!r}")
        rule = DecisionRule(tau=float(values["rule.tau"]), m=int(values["rule.m"]), mode=values["rule.mode"])

        def section(prefix):
            levels = {
                level: Confusion(**{f.name: int(values[f"{prefix}.{level}.{f.name}"]) for f in fields(Confusion)})
                for level in ("timestep", "sequence")
            }
            return Section(levels["timestep"], levels["sequence"],
                           int(values[f"{prefix}.exact"]), int(values[f"{prefix}.windows"]))

        client_ids = sorted({int(k.split(".")[1]) for k in values if k.startswith("client.")})
        return cls(rule, section("global"), {c: section(f"client.{c}") for c in client_ids})

    def render_table(self):
        """Human-readable summary table."""
        header = (f"{'scope':<8} {'windows':>8} {'ts_acc':>7} {'ts_f1':>7} {'seq_acc':>7} "
                  f"{'seq_p':>7} {'seq_r':>7} {'seq_f1':>7} {'seq_fpr':>8} {'exact':>7}")
        rows = [f"operating point: tau={self.rule.tau:g} m={self.rule.m} mode={self.rule.mode}", header,
                "-" * len(header)]
        for name, s in [("global", self.overall)] + [(str(c), s) for c, s in sorted(self.clients.items())]:
            rows.append(
                f"{name:<8} {s.windows:>8} {s.timestep.accuracy:>7.4f} {s.timestep.f1:>7.4f} "
                f"{s.sequence.accuracy:>7.4f} {s.sequence.precision:>7.4f} {s.sequence.recall:>7.4f} "
                f"{s.sequence.f1:>7.4f} {s.sequence.fpr:>8.5f} {s.exact_match_rate:>7.4f}"
            )
        t = self.overall.timestep
        rows.append("")
        rows.append(f"timestep confusion: TP={t.tp} FP={t.fp} TN={t.tn} FN={t.fn} "
                    f"(normal P/R/F1 {t.precision_normal:.4f}/{t.recall_normal:.4f}/{t.f1_normal:.4f}, "
                    f"attack P/R/F1 {t.precision:.4f}/{t.recall:.4f}/{t.f1:.4f})")
        q = self.overall.sequence
        rows.append(f"sequence confusion: TP={q.tp} FP={q.fp} TN={q.tn} FN={q.fn}")
        return "\n".join(rows) + "\n"

    def summary(self):
        s = self.overall
        return {
            "windows": s.windows,
            "ts_accuracy": s.timestep.accuracy,
            "ts_f1": s.timestep.f1,
            "seq_accuracy": s.sequence.accuracy,
            "seq_precision": s.sequence.precision,
            "seq_recall": s.sequence.recall,
            "seq_f1": s.sequence.f1,
            "seq_fpr": s.sequence.fpr,
            "exact_match": s.exact_match_rate,
        }


# ---------- predictions ----------

@dataclass
class WindowPrediction:
    client: int
    start: int
    probs: np.ndarray
    labels: np.ndarray


def predict(params, clients, split, model_cfg, batch_size=256):
    """Eval-mode probabilities for every window of the split, per client."""
    predictions = []
    for node in sorted(clients):
        windows = clients[node].split(split)
        for offset in range(0, len(windows), batch_size):
            chunk = windows[offset:offset + batch_size]
            out = encode_batch(EncoderInputs.from_samples(chunk), params, model_cfg, mode="eval")
            for sample, probs in zip(chunk, out.probs):
                predictions.append(WindowPrediction(node, sample.start, probs, sample.labels.copy()))
    return predictions


def _stack(predictions):
    if not predictions:
        raise ReportError("no windows to evaluate")
    probs = np.stack([p.probs for p in predictions])
    labels = np.stack([p.labels for p in predictions]).astype(np.int64)
    clients = np.array([p.client for p in predictions])
    return probs, labels, clients


def _section(y_hat, labels, seq_hat):
    seq_true = labels.max(axis=1)
    return Section(
        timestep=Confusion.from_arrays(y_hat, labels),
        sequence=Confusion.from_arrays(seq_hat, seq_true),
        exact=int(np.all(y_hat == labels, axis=1).sum()),
        windows=len(labels),
    )


def compute_metrics(predictions, rule=None):
    """Global and per-client report at one operating point."""
    rule = rule or DecisionRule()
    probs, labels, clients = _stack(predictions)
    check_rule_window(rule.m, probs.shape[1])
    y_hat = decide_timesteps(probs, rule.tau)
    seq_hat = decide_sequences(y_hat, rule.m, rule.mode)
    per_client = {}
    for c in np.unique(clients):
        mask = clients == c
        per_client[int(c)] = _section(y_hat[mask], labels[mask], seq_hat[mask])
    return MetricsReport(rule, _section(y_hat, labels, seq_hat), per_client)


SWEEP_COLUMNS = ["tau", "m", "mode", "seq_f1", "seq_fpr", "seq_precision", "seq_recall", "seq_accuracy", "ts_f1",
                 "exact_match"]


def sweep(predictions, taus, ms, mode="consecutive"):
    """One row per (tau, m) from cached probabilities."""
    if not len(taus) or not len(ms):
        raise ValueError("sweep grids must be non-empty")
    probs, labels, _ = _stack(predictions)
    for m in ms:
        check_rule_window(int(m), probs.shape[1])
    seq_true = labels.max(axis=1)
    rows = []
    for tau in taus:
        y_hat = decide_timesteps(probs, tau)
        ts = Confusion.from_arrays(y_hat, labels)
        exact = float(np.all(y_hat == labels, axis=1).mean())
        for m in ms:
            seq = Confusion.from_arrays(decide_sequences(y_hat, m, mode), seq_true)
            rows.append({
                "tau": float(tau), "m": int(m), "mode": mode,
                "seq_f1": seq.f1, "seq_fpr": seq.fpr, "seq_precision": seq.precision,
                "seq_recall": seq.recall, "seq_accuracy": seq.accuracy, "ts_f1": ts.f1,
                "exact_match": exact,
            })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def check_sweep_monotonicity(table, tol=0.0):
    """Grid points where SeqFPR rises with tau (fixed m) or with m (fixed tau)."""
    violations = []
    for m, group in table.groupby("m", sort=True):
        ordered = group.sort_values("tau")
        fpr = ordered["seq_fpr"].to_numpy()
        for i in np.flatnonzero(np.diff(fpr) > tol):
            violations.append(("tau", float(ordered["tau"].iloc[i + 1]), int(m)))
    for tau, group in table[table["mode"] == "consecutive"].groupby("tau", sort=True):
        ordered = group.sort_values("m")
        fpr = ordered["seq_fpr"].to_numpy()
        for i in np.flatnonzero(np.diff(fpr) > tol):
            violations.append(("m", float(tau), int(ordered["m"].iloc[i + 1])))
    return violations


def write_sweep_csv(table, path):
    table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_sweep_csv(path):
    return pd.read_csv(path, float_precision="round_trip")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(table, out_dir):
    """Seq-F1 and Seq-FPR versus tau per m, plus a Seq-F1 heatmap."""
    plt = _pyplot()
    paths = []
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for m, group in table.groupby("m", sort=True):
        ordered = group.sort_values("tau")
        axes[0].plot(ordered["tau"], ordered["seq_f1"], marker="o", label=f"m={m}")
        axes[1].plot(ordered["tau"], ordered["seq_fpr"], marker="o", label=f"m={m}")
    axes[0].set_xlabel("tau")
    axes[0].set_ylabel("Seq-F1")
    axes[1].set_xlabel("tau")
    axes[1].set_ylabel("Seq-FPR")
    for ax in axes:
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    curves = f"{out_dir}/sweep_curves.png"
    fig.savefig(curves, dpi=120)
    plt.close(fig)
    paths.append(curves)

    grid = table.pivot_table(index="m", columns="tau", values="seq_f1")
    fig, ax = plt.subplots(figsize=(8, 3))
    image = ax.imshow(grid.to_numpy(), aspect="auto", cmap="viridis", origin="lower")
    ax.set_xticks(range(len(grid.columns)), [f"{t:.2f}" for t in grid.columns])
    ax.set_yticks(range(len(grid.index)), [str(m) for m in grid.index])
    ax.set_xlabel("tau")
    ax.set_ylabel("m")
    fig.colorbar(image, ax=ax, label="Seq-F1")
    fig.tight_layout()
    heatmap = f"{out_dir}/sweep_heatmap.png"
    fig.savefig(heatmap, dpi=120)
    plt.close(fig)
    paths.append(heatmap)
    logger.info("wrote sweep plots to %s", out_dir)
    return paths


def plot_confusion(report, out_dir, split="test"):
    """Global timestep and sequence confusion matrices, rows actual, columns predicted."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, level in zip(axes, ("timestep", "sequence")):
        c = getattr(report.overall, level)
        counts = np.array([[c.tn, c.fp], [c.fn, c.tp]])
        ax.imshow(counts, cmap="Blues")
        for (i, j), value in np.ndenumerate(counts):
            ax.text(j, i, str(value), ha="center", va="center",
                    color="white" if value > counts.max() / 2 else "black")
        ax.set_xticks([0, 1], ["normal", "attack"])
        ax.set_yticks([0, 1], ["normal", "attack"])
        ax.set_xlabel("predicted")
        ax.set_ylabel("actual")
        ax.set_title(f"{level} (tau={report.rule.tau:g}, m={report.rule.m})")
    fig.tight_layout()
    path = f"{out_dir}/confusion_{split}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def client_scores(report):
    """Timestep-level attack precision, recall and F1 per client."""
    return pd.DataFrame(
        [{"client": c, "precision": s.timestep.precision, "recall": s.timestep.recall, "f1": s.timestep.f1}
         for c, s in sorted(report.clients.items())],
        columns=["client", "precision", "recall", "f1"],
    )


def plot_client_scores(report, out_dir, split="test"):
    plt = _pyplot()
    scores = client_scores(report)
    x = np.arange(len(scores))
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(scores) + 2), 4))
    for offset, metric in zip((-0.27, 0.0, 0.27), ("precision", "recall", "f1")):
        ax.bar(x + offset, scores[metric], width=0.27, label=metric)
    ax.set_xticks(x, [str(c) for c in scores["client"]])
    ax.set_xlabel("client")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = f"{out_dir}/clients_{split}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


COMPARISON_COLUMNS = ["scope", "fed_ts_f1", "cen_ts_f1", "delta_ts_f1", "fed_seq_f1", "cen_seq_f1",
                      "fed_seq_fpr", "cen_seq_fpr"]


def compare_reports(federated, centralized):
    """Per-scope federated and centralized scores; delta is federated minus centralized."""
    if sorted(federated.clients) != sorted(centralized.clients):
        raise ReportError(f"client sets differ: {sorted(federated.clients)} vs {sorted(centralized.clients)}")
    if federated.rule != centralized.rule:
        raise ReportError("reports were computed at different operating points")
    scopes = [("global", federated.overall, centralized.overall)]
    scopes += [(str(c), federated.clients[c], centralized.clients[c]) for c in sorted(federated.clients)]
    rows = []
    for name, fed, cen in scopes:
        rows.append({
            "scope": name,
            "fed_ts_f1": fed.timestep.f1, "cen_ts_f1": cen.timestep.f1,
            "delta_ts_f1": fed.timestep.f1 - cen.timestep.f1,
            "fed_seq_f1": fed.sequence.f1, "cen_seq_f1": cen.sequence.f1,
            "fed_seq_fpr": fed.sequence.fpr, "cen_seq_fpr": cen.sequence.fpr,
        })
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def plot_comparison(table, out_dir, split="test"):
    """Per-client timestep F1 delta and Seq-FPR of both training modes."""
    plt = _pyplot()
    clients = table[table["scope"] != "global"]
    x = np.arange(len(clients))
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].bar(x, clients["delta_ts_f1"], color=np.where(clients["delta_ts_f1"] >= 0, "tab:green", "tab:red"))
    axes[0].axhline(0.0, color="black", linewidth=0.8)
    axes[0].set_ylabel("F1 federated - centralized")
    axes[1].bar(x - 0.2, clients["fed_seq_fpr"], width=0.4, label="federated")
    axes[1].bar(x + 0.2, clients["cen_seq_fpr"], width=0.4, label="centralized")
    axes[1].set_ylabel("Seq-FPR")
    axes[1].legend()
    for ax in axes:
        ax.set_xticks(x, list(clients["scope"]))
        ax.set_xlabel("client")
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = f"{out_dir}/compare_{split}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
