"""
Synthetic physical-layer telemetry with gradual passive-attack perturbations.

Every node gets one frame per timestep: complex CSI per subcarrier, SNR,
latency, observed packet error rate, transmission attempts and the time since
the node last transmitted. Attack windows on wireless nodes ramp in a small
SNR drop, an extra scattering path with a carrier-offset bias, a BER
multiplier and a latency shift. Wired nodes are never perturbed.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import signal as scipy_signal
from scipy import stats

from src.gridsentinel.config import GeneratorConfig, SplitSpec
from src.gridsentinel.errors import DomainError, ScheduleError
from src.gridsentinel.topology import Role, Technology

logger = logging.getLogger("gridsentinel.telemetry")


@dataclass(frozen=True)
class ChannelProfile:
    snr_db: float
    snr_std_db: float
    latency_ms: float
    jitter_ms: float
    ber: float

    def to_dict(self):
        return asdict(self)


CHANNEL_PROFILES = {
    Technology.ZIGBEE: ChannelProfile(snr_db=18.0, snr_std_db=1.0, latency_ms=25.0, jitter_ms=2.0, ber=1e-4),
    Technology.LTE: ChannelProfile(snr_db=22.0, snr_std_db=1.2, latency_ms=40.0, jitter_ms=3.0, ber=5e-5),
    Technology.PLC: ChannelProfile(snr_db=15.0, snr_std_db=0.8, latency_ms=30.0, jitter_ms=2.0, ber=2e-4),
    Technology.FIBER_ETHERNET: ChannelProfile(snr_db=35.0, snr_std_db=0.3, latency_ms=2.0, jitter_ms=0.2, ber=1e-5),
}

# probability that a node transmits in a given timestep
ROLE_TX_PROB = {
    Role.SMART_METER: 0.6,
    Role.DER: 0.7,
    Role.NEIGHBORHOOD_GATEWAY: 0.95,
    Role.SCADA: 0.9,
    Role.PMU: 0.98,
    Role.SUBSTATION_CONTROLLER: 0.9,
    Role.AMI: 0.85,
}

# relative likelihood that an eavesdropper targets a node of this role
ROLE_ATTACK_WEIGHT = {
    Role.SMART_METER: 1.0,
    Role.DER: 1.5,
    Role.NEIGHBORHOOD_GATEWAY: 3.0,
    Role.SCADA: 1.0,
    Role.PMU: 1.0,
    Role.SUBSTATION_CONTROLLER: 2.0,
    Role.AMI: 2.0,
}

MIN_TIMESTEPS = 100
EXTRA_PATH_COEFF = 0.8
JITTER_COEFF = 0.9


def csi_columns(n_sub):
    return [f"csi_re_{k}" for k in range(n_sub)] + [f"csi_im_{k}" for k in range(n_sub)]


def frame_columns(n_sub):
    return ["t", *csi_columns(n_sub), "snr_db", "latency_ms", "per", "tx_count", "time_since_last_tx", "label"]


# ---------- formulas ----------

def per_from_ber(ber, packet_bits):
    """Packet error rate under independent bit errors: 1 - (1 - ber)^bits."""
    ber_arr = np.asarray(ber, dtype=np.float64)
    if np.any((ber_arr < 0) | (ber_arr > 1)) or packet_bits < 1:
        raise DomainError(f"per_from_ber needs ber in [0, 1] and packet_bits >= 1 (got bits={packet_bits})")
    with np.errstate(divide="ignore"):
        per = -np.expm1(packet_bits * np.log1p(-ber_arr))
    return float(per) if per.ndim == 0 else per


def snr_db(p_signal, p_noise):
    """Signal-to-noise ratio in decibels."""
    if p_signal <= 0 or p_noise <= 0:
        raise DomainError(f"snr_db needs positive powers (got {p_signal}, {p_noise})")
    return 10.0 * np.log10(p_signal / p_noise)


def phase_drift(f_off, t_symb):
    """Phase advance in radians over one symbol for a carrier-frequency offset."""
    if np.any(np.asarray(t_symb) <= 0):
        raise DomainError("phase_drift needs a positive symbol duration")
    return 2.0 * np.pi * f_off * t_symb


def two_sample_pvalue(a, b):
    """Two-sample Kolmogorov-Smirnov p-value."""
    return float(stats.ks_2samp(np.asarray(a), np.asarray(b)).pvalue)


def _ar1(noise, coeff):
    """Stationary AR(1) filter over axis 0 with unit marginal variance."""
    return scipy_signal.lfilter([np.sqrt(1.0 - coeff * coeff)], [1.0, -coeff], noise, axis=0)


# ---------- channel state ----------

@dataclass(frozen=True)
class ChannelState:
    amplitudes: np.ndarray
    phases: np.ndarray
    f_off: float = 0.0
    t_symb: float = 1e-4

    def __post_init__(self):
        if self.amplitudes.shape != self.phases.shape:
            raise DomainError("amplitude and phase vectors differ in length")
        if np.any(self.amplitudes < 0):
            raise DomainError("CSI amplitudes must be non-negative")

    @classmethod
    def from_complex(cls, coefficients, f_off=0.0, t_symb=1e-4):
        coefficients = np.asarray(coefficients, dtype=np.complex128)
        phases = np.angle(coefficients)
        phases = np.where(phases >= np.pi, phases - 2.0 * np.pi, phases)
        return cls(np.abs(coefficients), phases, f_off, t_symb)

    @property
    def n_sub(self):
        return len(self.amplitudes)

    @property
    def coefficients(self):
        return self.amplitudes * np.exp(1j * self.phases)


@dataclass(frozen=True)
class TelemetryFrame:
    node: int
    t: int
    csi: ChannelState
    snr_db: float
    latency_ms: float
    per: float
    tx_count: int
    time_since_last_tx: int
    label: int


# ---------- attack schedule ----------

@dataclass(frozen=True)
class AttackWindow:
    node: int
    start: int
    end: int  # exclusive
    ramp: int

    @property
    def length(self):
        return self.end - self.start


@dataclass
class AttackSchedule:
    windows: list = field(default_factory=list)

    @property
    def targeted_nodes(self):
        return sorted({w.node for w in self.windows})

    def for_node(self, node):
        return sorted((w for w in self.windows if w.node == node), key=lambda w: w.start)

    def labels(self, node, timesteps):
        labels = np.zeros(timesteps, dtype=np.int64)
        for w in self.for_node(node):
            labels[w.start:w.end] = 1
        return labels

    def intensity(self, node, timesteps):
        """Perturbation scale in [0, 1]: linear ramp from each window start, then flat."""
        scale = np.zeros(timesteps)
        for w in self.for_node(node):
            steps = np.arange(w.length, dtype=np.float64) + 1.0
            scale[w.start:w.end] = np.minimum(1.0, steps / w.ramp)
        return scale

    def to_records(self):
        return [{"node": w.node, "start": w.start, "end": w.end, "ramp": w.ramp}
                for w in sorted(self.windows, key=lambda w: (w.node, w.start))]

    @classmethod
    def from_records(cls, records):
        return cls([AttackWindow(int(r["node"]), int(r["start"]), int(r["end"]), int(r["ramp"])) for r in records])


def attack_coverage(schedule, timesteps):
    """Fraction of labeled cells over the timelines of targeted nodes."""
    targeted = schedule.targeted_nodes
    if not targeted:
        return 0.0
    labeled = sum(int(schedule.labels(n, timesteps).sum()) for n in targeted)
    return labeled / (timesteps * len(targeted))


def attack_target_weights(topo, nodes, covered):
    """Role weight times one plus the number of already-attacked wireless neighbors."""
    return np.array([
        ROLE_ATTACK_WEIGHT[topo.node(n).role] * (1.0 + sum(covered[j] > 0 for j in topo.wireless_neighbors(n)))
        for n in nodes
    ], dtype=np.float64)


def schedule_attacks(topo, cfg, split, rng):
    """Place attack windows on every wireless node inside split segments.

    Each window goes to a node still below its coverage target, drawn by
    attack_target_weights, so high-value roles and neighbors of attacked
    nodes are hit first. Windows never touch buffer zones or cross a
    segment boundary. With probability cfg.co_occurrence a window is
    mirrored onto a wireless neighbor chosen by role weight.
    """
    timesteps = cfg.timesteps
    segments = list(split.boundaries(timesteps).values())
    target = round(cfg.coverage * timesteps)
    floor = (cfg.coverage - cfg.coverage_tolerance) * timesteps
    usable = sum(end - start for start, end in segments)
    if target > usable:
        raise ScheduleError(f"coverage {cfg.coverage} needs {target} cells but only {usable} lie outside buffers")

    occupied = {n: np.zeros(timesteps, dtype=bool) for n in topo.wireless_ids}
    covered = dict.fromkeys(topo.wireless_ids, 0)
    windows = []

    def free(node, start, end):
        return not occupied[node][max(start - 1, 0):min(end + 1, timesteps)].any()

    def place(node, start, end):
        occupied[node][start:end] = True
        covered[node] += end - start
        windows.append(AttackWindow(node, start, end, cfg.ramp_length))

    attempts = dict.fromkeys(topo.wireless_ids, 0)
    while pending := [n for n in topo.wireless_ids if covered[n] < target and attempts[n] < 2000]:
        weights = attack_target_weights(topo, pending, covered)
        node = pending[int(rng.choice(len(pending), p=weights / weights.sum()))]
        attempts[node] += 1
        need = target - covered[node]
        length = min(int(rng.integers(cfg.min_attack_len, cfg.max_attack_len + 1)), need)
        fitting = [(s, e) for s, e in segments if e - s >= length]
        if not fitting:
            length = max(e - s for s, e in segments)
            fitting = [(s, e) for s, e in segments if e - s >= length]
        weights = np.array([e - s for s, e in fitting], dtype=np.float64)
        seg_start, seg_end = fitting[int(rng.choice(len(fitting), p=weights / weights.sum()))]
        start = int(rng.integers(seg_start, seg_end - length + 1))
        mirror_draw = rng.random()
        if not free(node, start, start + length):
            continue
        place(node, start, start + length)

        if mirror_draw < cfg.co_occurrence:
            candidates = [j for j in topo.wireless_neighbors(node)
                          if covered[j] + length <= target and free(j, start, start + length)]
            if candidates:
                w = np.array([ROLE_ATTACK_WEIGHT[topo.node(j).role] for j in candidates])
                place(candidates[int(rng.choice(len(candidates), p=w / w.sum()))], start, start + length)

    for node in topo.wireless_ids:
        if covered[node] < floor:
            raise ScheduleError(
                f"node {node}: reached {covered[node]}/{timesteps} attack cells, below coverage "
                f"{cfg.coverage - cfg.coverage_tolerance:.2f}; horizon too short for the attack layout"
            )

    schedule = AttackSchedule(sorted(windows, key=lambda w: (w.node, w.start)))
    logger.info("scheduled %d attack windows on %d nodes (coverage %.3f)",
                len(schedule.windows), len(schedule.targeted_nodes), attack_coverage(schedule, timesteps))
    return schedule


# ---------- dataset ----------

@dataclass
class TelemetryDataset:
    topology: object
    config: GeneratorConfig
    split: SplitSpec
    schedule: AttackSchedule
    frames: dict  # node id -> DataFrame with frame_columns(n_sub)
    node_cfo: dict

    @property
    def timesteps(self):
        return self.config.timesteps

    def csi(self, node):
        """Complex CSI matrix (T, N_sub) of one node."""
        df = self.frames[node]
        n_sub = self.config.n_sub
        re = df[[f"csi_re_{k}" for k in range(n_sub)]].to_numpy()
        im = df[[f"csi_im_{k}" for k in range(n_sub)]].to_numpy()
        return re + 1j * im

    def iter_frames(self, node=None):
        """Yield TelemetryFrame objects in (node, t) order."""
        nodes = [node] if node is not None else sorted(self.frames)
        for n in nodes:
            df = self.frames[n]
            csi = self.csi(n)
            for row, h in zip(df.itertuples(index=False), csi):
                yield TelemetryFrame(
                    node=n,
                    t=int(row.t),
                    csi=ChannelState.from_complex(h, self.node_cfo[n], self.config.t_symb),
                    snr_db=float(row.snr_db),
                    latency_ms=float(row.latency_ms),
                    per=float(row.per),
                    tx_count=int(row.tx_count),
                    time_since_last_tx=int(row.time_since_last_tx),
                    label=int(row.label),
                )


def _simulate_node(node, cfg, intensity, labels, seed):
    """Frame table for one node; every random component has its own stream."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, node.id]).spawn(6)]
    rng_csi, rng_extra, rng_snr, rng_err, rng_lat, rng_traffic = streams
    profile = CHANNEL_PROFILES[node.technology]
    timesteps, n_sub = cfg.timesteps, cfg.n_sub

    # CSI: fixed line-of-sight part, AR(1) scattering, extra eavesdropper path, CFO rotation
    los = rng_csi.uniform(0.8, 1.2, n_sub) * np.exp(1j * rng_csi.uniform(-np.pi, np.pi, n_sub))
    cfo = float(rng_csi.normal(0.0, cfg.cfo_hz))
    innovation = (rng_csi.standard_normal((timesteps, n_sub))
                  + 1j * rng_csi.standard_normal((timesteps, n_sub))) / np.sqrt(2.0)
    scatter = cfg.scatter_std * _ar1(innovation, cfg.fading_coeff)
    extra_noise = (rng_extra.standard_normal((timesteps, n_sub))
                   + 1j * rng_extra.standard_normal((timesteps, n_sub))) / np.sqrt(2.0)
    extra = cfg.csi_path_amplitude * np.abs(los).mean() * _ar1(extra_noise, EXTRA_PATH_COEFF)
    rotation = np.cumsum(phase_drift(cfo + cfg.cfo_bias_hz * intensity, cfg.t_symb))
    csi = (los[None, :] + scatter + intensity[:, None] * extra) * np.exp(1j * rotation)[:, None]

    snr = (profile.snr_db + profile.snr_std_db * _ar1(rng_snr.standard_normal(timesteps), cfg.fading_coeff)
           - cfg.snr_drop_db * intensity)

    ber = profile.ber * 10.0 ** ((profile.snr_db - snr) / 10.0) * (1.0 + (cfg.ber_multiplier - 1.0) * intensity)
    per_true = per_from_ber(np.clip(ber, 0.0, 0.5), cfg.packet_bits)
    per_observed = rng_err.binomial(cfg.packets_per_step, per_true) / cfg.packets_per_step
    tx_count = np.minimum(rng_err.geometric(np.clip(1.0 - per_true, 1e-3, 1.0)), cfg.max_tx)

    jitter = _ar1(rng_lat.standard_normal(timesteps), JITTER_COEFF)
    latency = (profile.latency_ms * (1.0 + cfg.latency_shift * intensity)
               + profile.jitter_ms * (1.0 + (cfg.latency_jitter_scale - 1.0) * intensity) * jitter
               + cfg.retx_delay_ms * (tx_count - 1))
    latency = np.maximum(latency, 0.1 * profile.latency_ms)

    sent = rng_traffic.random(timesteps) < ROLE_TX_PROB[node.role]
    steps = np.arange(timesteps)
    last_sent = np.maximum.accumulate(np.where(sent, steps, -1))
    time_since = steps - last_sent

    columns = {"t": steps}
    for k in range(n_sub):
        columns[f"csi_re_{k}"] = csi[:, k].real
    for k in range(n_sub):
        columns[f"csi_im_{k}"] = csi[:, k].imag
    columns.update({
        "snr_db": snr,
        "latency_ms": latency,
        "per": per_observed,
        "tx_count": tx_count.astype(np.int64),
        "time_since_last_tx": time_since.astype(np.int64),
        "label": labels,
    })
    return pd.DataFrame(columns, columns=frame_columns(n_sub)), cfo


def simulate(topo, cfg, split=None):
    """Generate the frame tables and attack schedule for every node."""
    split = split or SplitSpec()
    if cfg.timesteps < MIN_TIMESTEPS:
        logger.warning("horizon of %d timesteps is below %d; too few windows for training", cfg.timesteps, MIN_TIMESTEPS)
    schedule = schedule_attacks(topo, cfg, split, np.random.default_rng([cfg.seed, 10_000]))

    frames, node_cfo = {}, {}
    for node in topo.nodes:
        if node.wireless:
            intensity = schedule.intensity(node.id, cfg.timesteps)
            labels = schedule.labels(node.id, cfg.timesteps)
        else:
            intensity = np.zeros(cfg.timesteps)
            labels = np.zeros(cfg.timesteps, dtype=np.int64)
        frames[node.id], node_cfo[node.id] = _simulate_node(node, cfg, intensity, labels, cfg.seed)
        logger.debug("node %d (%s): %d labeled timesteps", node.id, node.name, int(labels.sum()))

    logger.info("simulated %d nodes x %d timesteps", len(frames), cfg.timesteps)
    return TelemetryDataset(topo, cfg, split, schedule, frames, node_cfo)
