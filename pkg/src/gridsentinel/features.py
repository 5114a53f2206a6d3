"""
Model inputs from telemetry: raw indicators, trailing-window statistics,
neighbor statistics, metadata one-hots, sliding windows and per-client
normalization fitted on the training split only.

Features are computed separately inside each split segment, so no statistic
ever looks across a buffer.
"""

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, stats

from src.gridsentinel.config import FeatureFlags
from src.gridsentinel.errors import DimensionError
from src.gridsentinel.topology import METADATA_DIM, metadata_vector, star_subgraph

logger = logging.getLogger("gridsentinel.features")

RAW_FEATURES = [
    "csi_amp_mean", "csi_amp_std", "csi_drift", "csi_entropy", "snr_db", "snr_delta",
    "latency_smoothed", "per", "per_delta", "tx_count", "time_since_last_tx",
]
DERIVED_CHANNELS = ["csi_amp_mean", "snr_db", "latency_smoothed", "per", "csi_drift"]
DERIVED_STATS = ["skew", "kurt", "slope", "drift", "flatness"]
DERIVED_FEATURES = [f"{c}_{s}" for c in DERIVED_CHANNELS for s in DERIVED_STATS]
NEIGHBOR_FEATURES = [
    "nbr_latency", "nbr_snr_db", "nbr_per", "nbr_csi_drift",
    "rho_latency", "rho_snr", "nbr_snr_std", "nbr_latency_std",
]
SPLITS = ("train", "val", "test")


# ---------- CSI statistics ----------

def csi_drift(h_t, h_prev):
    """Mean modulus of the per-subcarrier change between two channel states."""
    if h_t.n_sub != h_prev.n_sub:
        raise DimensionError(f"subcarrier counts differ: {h_t.n_sub} vs {h_prev.n_sub}")
    return float(np.mean(np.abs(h_t.coefficients - h_prev.coefficients)))


def csi_drift_series(csi):
    """Drift per timestep of a (T, N_sub) complex matrix; the first step is 0."""
    drift = np.zeros(csi.shape[0])
    drift[1:] = np.abs(np.diff(csi, axis=0)).mean(axis=1)
    return drift


def csi_entropy_rows(amplitudes, bins=16, eps=1e-9):
    """Smoothed histogram entropy in bits, one value per row."""
    amplitudes = np.atleast_2d(np.asarray(amplitudes, dtype=np.float64))
    rows, _ = amplitudes.shape
    lo = amplitudes.min(axis=1, keepdims=True)
    span = amplitudes.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    index = np.where(span > 0, np.floor((amplitudes - lo) / safe * bins), 0).astype(np.int64)
    index = np.clip(index, 0, bins - 1)
    counts = np.zeros((rows, bins))
    np.add.at(counts, (np.repeat(np.arange(rows), amplitudes.shape[1]), index.ravel()), 1.0)
    p = (counts + eps) / (counts + eps).sum(axis=1, keepdims=True)
    return -(p * np.log2(p)).sum(axis=1)


def csi_entropy(amplitudes, bins=16, eps=1e-9):
    """Entropy of the amplitude histogram over equal-width bins spanning [min, max]."""
    if bins < 2 or eps <= 0 or len(amplitudes) == 0:
        raise ValueError("csi_entropy needs bins >= 2, eps > 0 and at least one amplitude")
    return float(csi_entropy_rows(np.asarray(amplitudes, dtype=np.float64)[None, :], bins, eps)[0])


# ---------- window statistics ----------

def trailing_windows(series, width):
    """(T, width) matrix of trailing windows; the segment start is edge-padded."""
    series = np.asarray(series, dtype=np.float64)
    padded = np.concatenate([np.full(width - 1, series[0]), series])
    return sliding_window_view(padded, width)


def derived_stats_rows(windows):
    """(skew, kurt, slope, drift, flatness) for every row of a (n, W) matrix."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    n, width = windows.shape
    if width < 4:
        raise DimensionError(f"derived statistics need windows of at least 4, got {width}")
    constant = np.ptp(windows, axis=1) == 0

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        skew = stats.skew(windows, axis=1, bias=True)
        kurt = stats.kurtosis(windows, axis=1, fisher=True, bias=True)
    skew = np.where(constant, 0.0, skew)
    kurt = np.where(constant, 0.0, kurt)

    t = np.arange(width, dtype=np.float64)
    tc = t - t.mean()
    slope = windows @ tc / (tc @ tc)
    drift = windows[:, -1] - windows[:, 0]

    magnitudes = np.abs(fft.rfft(windows, axis=1))[:, 1:]
    all_zero = ~np.any(magnitudes > 0, axis=1)
    any_zero = np.any(magnitudes == 0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        flatness = stats.gmean(np.where(any_zero[:, None], 1.0, magnitudes), axis=1) / magnitudes.mean(axis=1)
    flatness = np.where(all_zero | constant, 1.0, np.where(any_zero, 0.0, flatness))
    flatness = np.clip(flatness, 0.0, 1.0)

    out = np.column_stack([skew, kurt, slope, drift, flatness])
    return np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0)


def derived_stats(series):
    """Statistics of a single window; see derived_stats_rows."""
    return tuple(float(v) for v in derived_stats_rows(np.asarray(series, dtype=np.float64)[None, :])[0])


def trailing_correlation(a, b, width):
    """Pearson correlation of a and b over trailing windows; flat windows give 0."""
    wa, wb = trailing_windows(a, width), trailing_windows(b, width)
    ac = wa - wa.mean(axis=1, keepdims=True)
    bc = wb - wb.mean(axis=1, keepdims=True)
    den = np.sqrt((ac * ac).sum(axis=1) * (bc * bc).sum(axis=1))
    flat = (np.ptp(wa, axis=1) == 0) | (np.ptp(wb, axis=1) == 0) | (den == 0)
    rho = (ac * bc).sum(axis=1) / np.where(flat, 1.0, den)
    return np.clip(np.where(flat, 0.0, rho), -1.0, 1.0)


# ---------- per-node tables ----------

def raw_features(frames, n_sub, flags=None):
    """The 11 raw indicators for a contiguous block of frames."""
    flags = flags or FeatureFlags()
    re = frames[[f"csi_re_{k}" for k in range(n_sub)]].to_numpy()
    im = frames[[f"csi_im_{k}" for k in range(n_sub)]].to_numpy()
    csi = re + 1j * im
    amplitude = np.abs(csi)
    snr = frames["snr_db"].to_numpy(dtype=np.float64)
    per = frames["per"].to_numpy(dtype=np.float64)
    latency = frames["latency_ms"].to_numpy(dtype=np.float64)

    table = pd.DataFrame({
        "csi_amp_mean": amplitude.mean(axis=1),
        "csi_amp_std": amplitude.std(axis=1),
        "csi_drift": csi_drift_series(csi),
        "csi_entropy": csi_entropy_rows(amplitude, flags.entropy_bins, flags.entropy_eps),
        "snr_db": snr,
        "snr_delta": np.concatenate([[0.0], np.diff(snr)]),
        "latency_smoothed": trailing_windows(latency, flags.smoothing).mean(axis=1),
        "per": per,
        "per_delta": np.concatenate([[0.0], np.diff(per)]),
        "tx_count": frames["tx_count"].to_numpy(dtype=np.float64),
        "time_since_last_tx": frames["time_since_last_tx"].to_numpy(dtype=np.float64),
    }, columns=RAW_FEATURES)
    table.index = frames["t"].to_numpy()
    return table


def derived_features(raw, stat_window):
    """25 trailing-window statistics over the derived channels."""
    blocks = [derived_stats_rows(trailing_windows(raw[c].to_numpy(), stat_window)) for c in DERIVED_CHANNELS]
    return pd.DataFrame(np.hstack(blocks), columns=DERIVED_FEATURES, index=raw.index)


def neighbor_rows(ego_raw, neighbor_raws, window):
    """Per-neighbor inputs (T, K, 8).

    Each row holds the neighbor's latency, SNR, PER and CSI drift, its trailing
    correlation with the ego on latency and SNR, and the neighborhood's SNR and
    latency dispersion at that timestep.
    """
    timesteps = len(ego_raw)
    k = len(neighbor_raws)
    out = np.zeros((timesteps, k, len(NEIGHBOR_FEATURES)))
    if k == 0:
        return out
    lat = np.column_stack([n["latency_smoothed"].to_numpy() for n in neighbor_raws])
    snr = np.column_stack([n["snr_db"].to_numpy() for n in neighbor_raws])
    out[:, :, 0] = lat
    out[:, :, 1] = snr
    out[:, :, 2] = np.column_stack([n["per"].to_numpy() for n in neighbor_raws])
    out[:, :, 3] = np.column_stack([n["csi_drift"].to_numpy() for n in neighbor_raws])
    ego_lat = ego_raw["latency_smoothed"].to_numpy()
    ego_snr = ego_raw["snr_db"].to_numpy()
    for j in range(k):
        out[:, j, 4] = trailing_correlation(ego_lat, lat[:, j], window)
        out[:, j, 5] = trailing_correlation(ego_snr, snr[:, j], window)
    out[:, :, 6] = snr.std(axis=1)[:, None]
    out[:, :, 7] = lat.std(axis=1)[:, None]
    return out


def neighbor_stats(ego_raw, neighbor_raws, window):
    """Neighborhood summary (T, 8): the mean of neighbor_rows over neighbors, zeros when K = 0."""
    rows = neighbor_rows(ego_raw, neighbor_raws, window)
    if rows.shape[1] == 0:
        return np.zeros((len(ego_raw), len(NEIGHBOR_FEATURES)))
    return rows.mean(axis=1)


# ---------- windows ----------

@dataclass
class WindowSample:
    ego: int
    start: int
    x_raw: np.ndarray   # (W, F_raw)
    x_nbr: np.ndarray   # (W, K, F_nbr)
    meta: np.ndarray    # (15,) or (0,)
    labels: np.ndarray  # (W,)
    split: str

    @property
    def end(self):
        """Last covered timestep (inclusive)."""
        return self.start + len(self.labels) - 1

    @property
    def sequence_label(self):
        return int(self.labels.max())


@dataclass
class SegmentFeatures:
    split: str
    t: np.ndarray
    raw: np.ndarray       # (T_seg, F_raw) with ablations applied
    nbr: np.ndarray       # (T_seg, K, F_nbr)
    labels: np.ndarray


@dataclass
class Normalizer:
    """Column z-scores fitted on one client's training segment."""

    raw_mean: np.ndarray
    raw_std: np.ndarray
    nbr_mean: np.ndarray
    nbr_std: np.ndarray

    @classmethod
    def fit(cls, segment):
        raw_mean, raw_std = segment.raw.mean(axis=0), segment.raw.std(axis=0)
        flat_nbr = segment.nbr.reshape(-1, segment.nbr.shape[-1])
        if len(flat_nbr):
            nbr_mean, nbr_std = flat_nbr.mean(axis=0), flat_nbr.std(axis=0)
        else:
            nbr_mean, nbr_std = np.zeros(segment.nbr.shape[-1]), np.ones(segment.nbr.shape[-1])
        return cls(raw_mean, np.where(raw_std > 0, raw_std, 1.0), nbr_mean, np.where(nbr_std > 0, nbr_std, 1.0))

    def apply(self, segment):
        return SegmentFeatures(
            split=segment.split,
            t=segment.t,
            raw=(segment.raw - self.raw_mean) / self.raw_std,
            nbr=(segment.nbr - self.nbr_mean) / self.nbr_std,
            labels=segment.labels,
        )


def input_dims(flags, n_neighbor_features=len(NEIGHBOR_FEATURES)):
    """(F_raw, F_nbr, F_meta) after ablation flags."""
    f_raw = len(RAW_FEATURES) + (len(DERIVED_FEATURES) if flags.derived else 0)
    return f_raw, (n_neighbor_features if flags.neighbor else 0), (METADATA_DIM if flags.metadata else 0)


def segment_features(dataset, node, split_name, bounds, flags):
    """Unnormalized features of one node inside one split segment."""
    start, end = bounds
    n_sub = dataset.config.n_sub
    star = star_subgraph(dataset.topology, node)

    def block(n):
        return dataset.frames[n].iloc[start:end]

    ego_raw = raw_features(block(node), n_sub, flags)
    parts = [ego_raw.to_numpy()]
    if flags.derived:
        parts.append(derived_features(ego_raw, flags.stat_window).to_numpy())
    raw = np.hstack(parts)

    if flags.neighbor:
        nbr = neighbor_rows(ego_raw, [raw_features(block(j), n_sub, flags) for j in star.neighbors], flags.stat_window)
    else:
        nbr = np.zeros((end - start, star.k, 0))
    labels = block(node)["label"].to_numpy(dtype=np.int64)
    return SegmentFeatures(split_name, np.arange(start, end), raw, nbr, labels)


def feature_table(dataset, node, split_name, flags=None, split=None):
    """Exportable per-timestep table with a header naming every column."""
    flags = flags or FeatureFlags()
    split = split or dataset.split
    bounds = split.boundaries(dataset.timesteps)[split_name]
    seg = segment_features(dataset, node, split_name, bounds, flags)
    columns = RAW_FEATURES + (DERIVED_FEATURES if flags.derived else [])
    table = pd.DataFrame(seg.raw, columns=columns)
    if flags.neighbor:
        summary = seg.nbr.mean(axis=1) if seg.nbr.shape[1] else np.zeros((len(seg.t), len(NEIGHBOR_FEATURES)))
        for i, name in enumerate(NEIGHBOR_FEATURES):
            table[name] = summary[:, i]
    table.insert(0, "t", seg.t)
    table["label"] = seg.labels
    return table


def _windows_from_segment(node, seg, meta, window, stride):
    count = len(seg.t)
    if count < window:
        logger.warning("node %d %s segment has %d timesteps, shorter than window %d; no windows",
                       node, seg.split, count, window)
        return []
    samples = []
    for offset in range(0, count - window + 1, stride):
        rows = slice(offset, offset + window)
        samples.append(WindowSample(
            ego=node,
            start=int(seg.t[offset]),
            x_raw=seg.raw[rows].copy(),
            x_nbr=seg.nbr[rows].copy(),
            meta=meta,
            labels=seg.labels[rows].copy(),
            split=seg.split,
        ))
    return samples


@dataclass
class ClientWindows:
    """All windows of one client, grouped by split."""

    node: int
    star: object
    normalizer: Normalizer
    train: list
    val: list
    test: list

    def split(self, name):
        return getattr(self, name)


def client_windows(dataset, node, flags=None, split=None):
    """Windows of one wireless client, normalized with its own training statistics."""
    flags = flags or FeatureFlags()
    split = split or dataset.split
    segments = {
        name: segment_features(dataset, node, name, bounds, flags)
        for name, bounds in split.boundaries(dataset.timesteps).items()
    }
    normalizer = Normalizer.fit(segments["train"])
    meta = metadata_vector(dataset.topology.node(node)) if flags.metadata else np.zeros(0)
    windows = {
        name: _windows_from_segment(node, normalizer.apply(seg), meta, flags.window, flags.stride)
        for name, seg in segments.items()
    }
    return ClientWindows(node, star_subgraph(dataset.topology, node), normalizer,
                         windows["train"], windows["val"], windows["test"])


def build_clients(dataset, flags=None, split=None):
    """ClientWindows for every wireless node, keyed by node id."""
    clients = {node: client_windows(dataset, node, flags, split) for node in dataset.topology.client_ids}
    logger.info("built windows for %d clients: %s", len(clients),
                ", ".join(f"{n}:{len(c.train)}/{len(c.val)}/{len(c.test)}" for n, c in clients.items()))
    return clients


def make_windows(dataset, window=9, stride=1, split=None, flags=None):
    """Every window of every wireless client, sorted by node id then start."""
    flags = flags or FeatureFlags()
    if window != flags.window or stride != flags.stride:
        flags = replace(flags, window=window, stride=stride)
    samples = []
    for client in build_clients(dataset, flags, split).values():
        samples.extend(client.train + client.val + client.test)
    return sorted(samples, key=lambda s: (s.ego, s.start))
