"""Seeded synthetic MS cohorts with a controllable amount of severity signal.

Every patient carries one latent severity in [0, 1]. Each modality group
(``ehr``, ``mri``, ``notes``) sees its own noisy copy of that severity; the
noise shrinks as the group's signal weight grows. With
``signal_strength="none"`` every group instead sees an independent decoy
draw, so no feature carries label information.

Seed splitting rule: patient ``i`` draws stream ``k`` from
``SeedSequence(seed, spawn_key=(i, k))``. Patients are therefore
independent of each other and of ``patient_count``.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import vocab

SIGNAL_LEVELS = ("none", "weak", "strong")
# Severity-view noise SD at equal group weights.
_VIEW_NOISE = {"weak": 0.30, "strong": 0.07}

_SEVERITY_BETA = (1.5, 3.5)
_EDSS_SCALE = 9.7
_TAG_CONTRAST = {"T1pre": 0.45, "T1post": 0.50, "T2": 0.55, "FLAIR": 0.60, "PD": 0.45}
BLOB_THRESHOLD = 0.45
# Availability: labs per encounter; notes per patient, then per encounter.
P_LAB_VISIT = 0.5
P_NOTES_PATIENT = 0.8
P_NOTE_VISIT = 0.8
_EPOCH = dt.datetime(1970, 1, 1)

# Stream ids for per-patient seed splitting.
_S_CORE, _S_ENC, _S_LABS, _S_VITALS, _S_MEDS, _S_NOTES, _S_VOL = range(7)


@dataclass
class SynthConfig:
    patient_count: int = 300
    seed: int = 0
    signal_strength: str = "strong"
    weight_ehr: float = 1 / 3
    weight_mri: float = 1 / 3
    weight_notes: float = 1 / 3
    volume_dims: tuple = (32, 32, 16)
    vocab_size: int = 500
    note_length_min: int = 100
    note_length_max: int = 400
    max_blobs: int = 6

    def __post_init__(self):
        self.volume_dims = tuple(int(v) for v in self.volume_dims)
        self.validate()

    @property
    def weights(self):
        return {"ehr": self.weight_ehr, "mri": self.weight_mri, "notes": self.weight_notes}

    def validate(self):
        if self.patient_count < 1:
            raise ValueError("patient_count must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.signal_strength not in SIGNAL_LEVELS:
            raise ValueError(f"signal_strength must be one of {SIGNAL_LEVELS}")
        w = self.weights
        if any(not 0.0 <= v <= 1.0 for v in w.values()):
            raise ValueError("signal weights must lie in [0, 1]")
        if self.signal_strength != "none" and not math.isclose(sum(w.values()), 1.0, abs_tol=1e-9):
            raise ValueError("signal weights must sum to 1")
        if len(self.volume_dims) != 3 or min(self.volume_dims) < 1:
            raise ValueError("volume_dims must be three positive integers")
        if self.vocab_size < len(vocab.SEVERITY_KEYWORDS) + 1:
            raise ValueError("vocab_size too small to hold the keyword set")
        if not 1 <= self.note_length_min <= self.note_length_max:
            raise ValueError("invalid note length range")
        if self.max_blobs < 0:
            raise ValueError("max_blobs must be >= 0")


@dataclass
class DemographicsVector:
    age: float
    sex: tuple
    race: tuple
    ethnicity: tuple

    def as_array(self):
        return np.array([self.age, *self.sex, *self.race, *self.ethnicity], dtype=np.float64)


@dataclass
class Volume:
    dims: tuple
    voxels: np.ndarray  # float32, shape == dims, C-order

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxels.shape != self.dims:
            self.voxels = np.asarray(self.voxels, dtype=np.float32).reshape(self.dims)


@dataclass
class Blob:
    center: tuple
    radii: tuple

    def bbox(self):
        lo = tuple(int(math.floor(c - r)) for c, r in zip(self.center, self.radii))
        hi = tuple(int(math.ceil(c + r)) for c, r in zip(self.center, self.radii))
        return lo, hi

    def contains(self, idx):
        lo, hi = self.bbox()
        return all(l <= i <= h for i, l, h in zip(idx, lo, hi))


@dataclass
class PatientRecord:
    patient_id: str
    encounters: list            # [(start_s, end_s)] wall-clock seconds since 1970
    lab_events: list            # [(t_s, feature_index, value)]
    vital_events: list
    med_events: list
    notes: list                 # [(encounter_index, [tokens])]
    volumes: list               # [(tag, Volume)] from the last imaging session
    demographics: DemographicsVector
    edss_per_visit: list
    latent_severity: float
    meta: dict = field(default_factory=dict)

    def events(self, category):
        return {"labs": self.lab_events, "vitals": self.vital_events, "meds": self.med_events}[category]

    @property
    def edss_current(self):
        return self.edss_per_visit[-1]


def milestone_label(edss, threshold):
    """EDSS milestone reached: strictly greater than ``threshold``."""
    if not 0.0 <= edss <= 10.0:
        raise ValueError(f"EDSS {edss} outside [0, 10]")
    return bool(edss > threshold)


def blob_count(severity, max_blobs):
    """Deterministic, nondecreasing lesion count for a severity in [0, 1]."""
    return int(math.floor(severity * max_blobs + 0.5))


def _seed_for(seed, patient, stream):
    return np.random.SeedSequence(seed, spawn_key=(patient, stream))


def _child(ss, k):
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,))


def _place_blobs(count, dims, rng):
    blobs = []
    attempts = 0
    while len(blobs) < count:
        attempts += 1
        if attempts > 20000:
            # Small volumes cannot hold every lesion; keep those that fit.
            break
        radii = tuple(float(r) for r in rng.uniform(1.3, 2.2, size=3))
        center = tuple(
            float(rng.uniform(r + 1.0, d - r - 2.0)) if d - r - 2.0 > r + 1.0 else (d - 1) / 2.0
            for r, d in zip(radii, dims)
        )
        ok = True
        for b in blobs:
            gap = math.dist(center, b.center)
            if gap < max(radii) + max(b.radii) + 2.0:
                ok = False
                break
        if ok:
            blobs.append(Blob(center, radii))
    return blobs


def render_volume(severity, sequence_tag, seed, dims=(32, 32, 16), max_blobs=6):
    """Render one synthetic scan.

    Smooth background noise in [0.1, 0.4] plus ``blob_count(severity)``
    bright ellipsoids. Blob geometry depends only on ``seed`` so the five
    sequences of one session show the same lesions; background noise is
    drawn per tag.

    Returns:
        (Volume, list of Blob)
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if sequence_tag not in _TAG_CONTRAST:
        raise ValueError(f"unknown sequence tag {sequence_tag!r}")
    dims = tuple(int(d) for d in dims)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    blob_rng = np.random.default_rng(_child(ss, 0))
    noise_rng = np.random.default_rng(_child(ss, 1 + vocab.SEQUENCE_TAGS.index(sequence_tag)))

    bg = ndimage.gaussian_filter(noise_rng.standard_normal(dims), sigma=2.0, mode="wrap")
    lo, hi = bg.min(), bg.max()
    bg = 0.1 + 0.3 * (bg - lo) / (hi - lo) if hi > lo else np.full(dims, 0.25)

    blobs = _place_blobs(blob_count(severity, max_blobs), dims, blob_rng)
    grid = np.indices(dims, dtype=np.float64)
    vox = bg
    for b in blobs:
        q = sum(((grid[a] - b.center[a]) / b.radii[a]) ** 2 for a in range(3))
        vox = np.where(q <= 1.0, vox + _TAG_CONTRAST[sequence_tag], vox)
    vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
    return Volume(dims, vox), blobs


def note_vocabulary(vocab_size):
    base = vocab_size - len(vocab.SEVERITY_KEYWORDS)
    return [f"w{i:03d}" for i in range(base)] + list(vocab.SEVERITY_KEYWORDS)


def keyword_rate(severity):
    return 0.01 + 0.30 * severity


def render_note(severity, rng, vocab_size=500, length_range=(100, 400)):
    """Draw one lowercase token sequence.

    Severity keywords appear with probability ``keyword_rate(severity)``
    per token; all other tokens follow a Zipf-like law over the base words.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    words = note_vocabulary(vocab_size)
    n_base = len(words) - len(vocab.SEVERITY_KEYWORDS)
    zipf = 1.0 / np.arange(1, n_base + 1)
    zipf /= zipf.sum()
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    is_kw = rng.random(length) < keyword_rate(severity)
    kw = rng.integers(0, len(vocab.SEVERITY_KEYWORDS), size=length)
    base = rng.choice(n_base, size=length, p=zipf)
    return [vocab.SEVERITY_KEYWORDS[k] if flag else words[b] for flag, k, b in zip(is_kw, kw, base)]


def _view(severity, strength, weight, rng):
    # Always consume the same number of draws so streams stay aligned.
    decoy = float(rng.beta(*_SEVERITY_BETA))
    z = float(rng.standard_normal())
    if strength == "none" or weight <= 0.0:
        return decoy
    sd = _VIEW_NOISE[strength] / math.sqrt(3.0 * weight)
    return float(np.clip(severity + sd * z, 0.0, 1.0))


def _round_half(x):
    return float(np.clip(np.floor(x * 2.0 + 0.5) / 2.0, 0.0, 10.0))


def _to_seconds(when):
    return int((when - _EPOCH).total_seconds())


def _encounters(rng, n_visits):
    first = dt.datetime(2010, 1, 1) + dt.timedelta(days=int(rng.integers(0, 5 * 365)))
    gaps = np.maximum(rng.gamma(2.0, 1.075, size=n_visits - 1) * 365.25, 7.0)
    days = np.concatenate([[0.0], np.cumsum(gaps)]).astype(int)
    out = []
    for d in days:
        start = first + dt.timedelta(days=int(d), hours=int(rng.integers(7, 15)), minutes=int(rng.integers(0, 60)))
        end = start + dt.timedelta(minutes=int(rng.integers(90, 361)))
        out.append((_to_seconds(start), _to_seconds(end)))
    years = (days - days[-1]) / 365.25  # <= 0, zero at current visit
    return out, years


def _times_in(rng, enc, k):
    return sorted(int(t) for t in rng.integers(enc[0], enc[1] + 1, size=k))


def _lab_events(rng, encounters, s_ehr):
    sig = vocab.LAB_FEATURES.index(vocab.SIGNAL_LAB)
    events = []
    for enc in encounters:
        if rng.random() >= P_LAB_VISIT:
            continue
        for t in _times_in(rng, enc, int(rng.integers(1, 3))):
            observed = rng.random(len(vocab.LAB_FEATURES)) < 0.35
            values = rng.standard_normal(len(vocab.LAB_FEATURES))
            observed[sig] = True
            values[sig] = 3.0 * s_ehr + 0.3 * values[sig]
            events.extend((t, j, float(values[j])) for j in np.flatnonzero(observed))
    return events


def _vital_events(rng, encounters):
    events = []
    for enc in encounters:
        for t in _times_in(rng, enc, int(rng.integers(1, 4))):
            observed = rng.random(len(vocab.VITAL_FEATURES)) < 0.8
            values = rng.standard_normal(len(vocab.VITAL_FEATURES))
            events.extend((t, j, float(values[j])) for j in np.flatnonzero(observed))
    return events


def _med_events(rng, encounters, s_ehr):
    sig = {vocab.MED_FEATURES.index(m) for m in vocab.SIGNAL_MEDS}
    p = np.array([0.05 + 0.5 * s_ehr if j in sig else 0.10 for j in range(len(vocab.MED_FEATURES))])
    events = []
    for enc in encounters:
        given = rng.random(len(p)) < p
        times = rng.integers(enc[0], enc[1] + 1, size=len(p))
        events.extend((int(times[j]), j, 1.0) for j in np.flatnonzero(given))
    events.sort()
    return events


def _one_hot(n, k):
    return tuple(1.0 if i == k else 0.0 for i in range(n))


def generate_patient(config, index):
    rng = np.random.default_rng(_seed_for(config.seed, index, _S_CORE))
    age_years = float(np.clip(rng.normal(43.62, 11.20), vocab.AGE_MIN, vocab.AGE_MAX))
    demo = DemographicsVector(
        age=(age_years - vocab.AGE_MIN) / (vocab.AGE_MAX - vocab.AGE_MIN),
        sex=_one_hot(len(vocab.SEX), int(rng.random() < 0.72)),
        race=_one_hot(len(vocab.RACE), int(rng.choice(len(vocab.RACE), p=[0.6, 0.25, 0.05, 0.1]))),
        ethnicity=_one_hot(len(vocab.ETHNICITY), int(rng.random() >= 0.2)),
    )
    severity = float(rng.beta(*_SEVERITY_BETA))
    views = {g: _view(severity, config.signal_strength, config.weights[g], rng) for g in ("ehr", "mri", "notes")}
    n_visits = int(min(1 + rng.poisson(2.39), 13))

    current = _EDSS_SCALE * severity + 0.20 * float(rng.standard_normal())
    drift = 0.15 + 0.25 * severity
    visit_noise = 0.25 * rng.standard_normal(n_visits)
    n_sessions = int(min(rng.binomial(4, 0.3), n_visits))
    session_visits = sorted(int(v) for v in rng.choice(n_visits, size=n_sessions, replace=False))

    enc_rng = np.random.default_rng(_seed_for(config.seed, index, _S_ENC))
    encounters, years = _encounters(enc_rng, n_visits)
    edss = [_round_half(current + drift * years[v] + (visit_noise[v] if v < n_visits - 1 else 0.0))
            for v in range(n_visits)]

    labs = _lab_events(np.random.default_rng(_seed_for(config.seed, index, _S_LABS)), encounters, views["ehr"])
    vitals = _vital_events(np.random.default_rng(_seed_for(config.seed, index, _S_VITALS)), encounters)
    meds = _med_events(np.random.default_rng(_seed_for(config.seed, index, _S_MEDS)), encounters, views["ehr"])

    note_rng = np.random.default_rng(_seed_for(config.seed, index, _S_NOTES))
    notes = []
    has_notes = note_rng.random() < P_NOTES_PATIENT
    for v in range(n_visits):
        if note_rng.random() < P_NOTE_VISIT and has_notes:
            notes.append((v, render_note(views["notes"], note_rng, config.vocab_size,
                                         (config.note_length_min, config.note_length_max))))

    volumes, blobs = [], []
    if n_sessions:
        vol_seed = _seed_for(config.seed, index, _S_VOL)
        for tag in vocab.SEQUENCE_TAGS:
            vol, blobs = render_volume(views["mri"], tag, vol_seed, config.volume_dims, config.max_blobs)
            volumes.append((tag, vol))

    meta = {
        "age_years": age_years,
        "views": views,
        "mri_sessions": n_sessions,
        "mri_visits": session_visits,
        "blobs": [{"center": list(b.center), "radii": list(b.radii)} for b in blobs],
    }
    return PatientRecord(
        patient_id=f"P{index:04d}",
        encounters=encounters,
        lab_events=labs,
        vital_events=vitals,
        med_events=meds,
        notes=notes,
        volumes=volumes,
        demographics=demo,
        edss_per_visit=edss,
        latent_severity=severity,
        meta=meta,
    )


def generate_cohort(config):
    """Generate ``config.patient_count`` patients; pure in ``config``."""
    config.validate()
    return [generate_patient(config, i) for i in range(config.patient_count)]
