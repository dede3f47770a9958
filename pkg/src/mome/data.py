"""Cohort files: binary feature formats, manifests, binning, synthesis.

On-disk layout (all little-endian):

* patch feature file: magic ``MMEF`` | version u32 | n_tokens u32 |
  dim u32 | float32 row-major payload,
* genomic file: magic ``MMEG`` | version u32 | six blocks of
  (group_id u8, length u32, float32 values) with ids 0..5 ascending,
* manifest: CSV with header
  ``sample_id,patho_path,geno_path,raw_time,censored,fold`` where paths
  are relative to the manifest's directory, censored is 0/1 and fold is
  -1 (unassigned) or a fold index.

Values are float32 on disk and promoted to float64 in memory.

The synthetic generator plants a controllable risk signal into one
modality, the other, or only their interaction, draws exponential
survival times from the latent risk, and optionally censors with an
independent exponential clock. Every per-sample draw comes from a
counter-based stream keyed ``seed XOR sample_index``, so generation is
order-independent and byte-reproducible.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .bpe import N_GROUPS, GenomicGroups
from .errors import ConfigError, DataError, FormatError
from .numcore import rng_stream

FEATURE_MAGIC = b"MMEF"
GENOMIC_MAGIC = b"MMEG"
FORMAT_VERSION = 1

MANIFEST_HEADER = ["sample_id", "patho_path", "geno_path", "raw_time", "censored", "fold"]

# Synthetic-cohort shape: days per unit exponential draw, group lengths,
# and signal strengths. Latent factors are sign-symmetric with magnitude
# bounded away from zero so every sample carries a readable signal; the
# gains put the oracle concordance ceiling near 0.85, leaving room for a
# trained model to clear the acceptance thresholds.
TIME_SCALE_DAYS = 365.0
DEFAULT_GROUP_SIZES = (12, 16, 20, 14, 18, 10)
CROSS_RISK_GAIN = 2.5
MARGINAL_RISK_GAIN = 3.0
PATCH_NOISE = 1.0
PATCH_AMPLITUDE = 1.5
PATCH_INFORMATIVE_FRACTION = 0.3
GROUP_NOISE = 0.5
GROUP_AMPLITUDE = 2.0
TARGET_GROUPS = (0, 1)
_FACTOR_OFFSET = 0.5
# Standard deviation of sign(z) * (offset + |z|) for standard normal z.
_FACTOR_STD = math.sqrt(_FACTOR_OFFSET**2 + 2.0 * _FACTOR_OFFSET * math.sqrt(2.0 / math.pi) + 1.0)
_COHORT_STREAM_SALT = 0x5EEDC0DE


def _bounded_factor(z: np.ndarray) -> np.ndarray:
    """Unit-variance, sign-symmetric factor whose magnitude never sits
    near zero, so the carried signal is readable in every sample."""
    return np.sign(z) * (_FACTOR_OFFSET + np.abs(z)) / _FACTOR_STD


# ---------------------------------------------------------------------------
# binary feature formats
# ---------------------------------------------------------------------------


def write_feature_file(path, bag: np.ndarray) -> None:
    arr = np.asarray(bag, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DataError(f"feature bag must be nonempty and rank-2, got shape {arr.shape}")
    n, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, n, dim))
        fh.write(arr.astype("<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {buf[:4]!r}", 0)
    if len(buf) < 16:
        raise FormatError(f"feature header needs 16 bytes, file has {len(buf)}", len(buf))
    version, n, dim = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    if n < 1:
        raise FormatError("feature file declares zero tokens", 8)
    expected = 16 + 4 * n * dim
    if len(buf) != expected:
        raise FormatError(f"feature payload: expected {expected} bytes, got {len(buf)}", 16)
    return np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float64).reshape(n, dim)


def write_genomic_file(path, groups: GenomicGroups) -> None:
    with open(path, "wb") as fh:
        fh.write(GENOMIC_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for group_id, values in enumerate(groups.values):
            if len(values) < 1:
                raise DataError(f"genomic group {group_id} is empty")
            fh.write(struct.pack("<BI", group_id, len(values)))
            fh.write(np.asarray(values, dtype="<f4").tobytes())


def read_genomic_file(path) -> GenomicGroups:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != GENOMIC_MAGIC:
        raise FormatError(f"bad genomic magic {buf[:4]!r}", 0)
    if len(buf) < 8:
        raise FormatError(f"genomic header needs 8 bytes, file has {len(buf)}", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported genomic file version {version}", 4)
    offset = 8
    values = []
    for expected_id in range(N_GROUPS):
        try:
            group_id, length = struct.unpack_from("<BI", buf, offset)
        except struct.error:
            raise FormatError(f"truncated genomic block header (group {expected_id})", offset)
        if group_id != expected_id:
            raise FormatError(f"genomic group id {group_id}, expected {expected_id}", offset)
        offset += 5
        nbytes = 4 * length
        if len(buf) < offset + nbytes:
            raise FormatError(
                f"genomic group {group_id}: expected {nbytes} payload bytes, "
                f"got {len(buf) - offset}",
                offset,
            )
        values.append(np.frombuffer(buf, dtype="<f4", count=length, offset=offset).astype(np.float64))
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last group", offset)
    return GenomicGroups(tuple(values))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRow:
    sample_id: str
    patho_path: str
    geno_path: str
    raw_time: float
    censored: bool
    fold: int = -1


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.sample_id,
                    row.patho_path,
                    row.geno_path,
                    repr(row.raw_time),
                    int(row.censored),
                    row.fold,
                ]
            )


def read_manifest(path, check_files: bool = True) -> list[ManifestRow]:
    base = os.path.dirname(os.path.abspath(path))
    rows: list[ManifestRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"manifest header {header} != {MANIFEST_HEADER}")
        for lineno, record in enumerate(reader, start=2):
            if len(record) != len(MANIFEST_HEADER):
                raise FormatError(f"manifest line {lineno} has {len(record)} fields")
            sample_id, patho, geno, raw_time, censored, fold = record
            if censored not in ("0", "1"):
                raise FormatError(f"manifest line {lineno}: censored must be 0/1, got {censored}")
            try:
                time_value = float(raw_time)
                fold_value = int(fold)
            except ValueError as err:
                raise FormatError(f"manifest line {lineno}: {err}")
            if time_value <= 0:
                raise FormatError(f"manifest line {lineno}: raw_time must be positive")
            if fold_value < -1:
                raise FormatError(f"manifest line {lineno}: fold must be >= -1")
            rows.append(
                ManifestRow(sample_id, patho, geno, time_value, censored == "1", fold_value)
            )
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise DataError("manifest sample_ids are not unique")
    if check_files:
        for row in rows:
            for rel in (row.patho_path, row.geno_path):
                if not os.path.exists(os.path.join(base, rel)):
                    raise DataError(f"manifest references missing file {rel}")
    return rows


def resolve_path(manifest_path, relative: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), relative)


# ---------------------------------------------------------------------------
# time discretization and folds
# ---------------------------------------------------------------------------


def discretize_times(rows: list[ManifestRow], n_bins: int) -> tuple[np.ndarray, list[int]]:
    """Quantile bin edges from uncensored times; every sample gets a bin.

    Edges sit at the 1/T .. (T-1)/T linear-interpolation quantiles of the
    uncensored raw times. Bin b covers times in (edge_{b-1}, edge_b], so
    assignment is monotone in raw_time.
    """
    if n_bins < 2:
        raise ConfigError("need at least two time bins")
    event_times = np.array([r.raw_time for r in rows if not r.censored])
    if len(event_times) < n_bins:
        raise DataError(
            f"need at least {n_bins} uncensored samples to place {n_bins - 1} edges, "
            f"got {len(event_times)}"
        )
    quantiles = np.arange(1, n_bins) / n_bins
    edges = np.quantile(event_times, quantiles)
    if np.any(np.diff(edges) <= 0):
        raise DataError("degenerate bin edges: uncensored times are too concentrated")
    bins = [int(np.searchsorted(edges, r.raw_time, side="left")) for r in rows]
    return edges, bins


def kfold_split(rows: list[ManifestRow], k: int = 5, seed: int = 0) -> list[int]:
    """Deterministic censorship-stratified partition into k folds.

    Both strata are shuffled and dealt round-robin with a shared running
    position, so fold sizes differ by at most one overall and within
    each stratum.
    """
    n = len(rows)
    if k < 2:
        raise ConfigError("need at least two folds")
    if k > n:
        raise DataError(f"cannot split {n} samples into {k} folds")
    rng = rng_stream(seed)
    folds = [0] * n
    position = 0
    for stratum in (False, True):
        indices = [i for i, r in enumerate(rows) if r.censored == stratum]
        rng.shuffle(indices)
        for idx in indices:
            folds[idx] = position % k
            position += 1
    return folds


# ---------------------------------------------------------------------------
# synthetic cohorts
# ---------------------------------------------------------------------------

SIGNALS = ("patho", "geno", "cross")


@dataclass
class SampleLatents:
    sample_id: str
    risk: float
    patho_factor: float
    geno_factor: float
    event_time: float
    censor_time: float


def _holdout_r2(features: np.ndarray, target: np.ndarray) -> float:
    """R-squared of a linear fit, measured on a held-out half.

    Fitting and scoring on the same samples would reward pure overfit
    (with d regressors and n samples even noise scores about d/n), so
    the fit uses even indices and the score odd ones. Negative scores
    clamp to zero: worse than the mean predictor means no signal.
    """
    design = np.column_stack([features, np.ones(len(target))])
    fit, score = slice(0, None, 2), slice(1, None, 2)
    coef, *_ = np.linalg.lstsq(design[fit], target[fit], rcond=None)
    resid = target[score] - design[score] @ coef
    total = np.sum((target[score] - target[score].mean()) ** 2)
    if total == 0:
        return 0.0
    return max(0.0, 1.0 - float(np.sum(resid**2) / total))


def cross_signal_self_test(
    patch_means: np.ndarray,
    group_means: np.ndarray,
    planted_direction: np.ndarray,
    risks: np.ndarray,
) -> dict[str, float]:
    """Verify that neither modality alone linearly predicts the risk but
    the planted cross term does. Returns the three held-out R² values."""
    patho_r2 = _holdout_r2(patch_means, risks)
    geno_r2 = _holdout_r2(group_means, risks)
    s_hat = patch_means @ planted_direction
    q_hat = group_means[:, list(TARGET_GROUPS)].mean(axis=1)
    cross_r2 = _holdout_r2((s_hat * q_hat)[:, None], risks)
    return {"patho_r2": patho_r2, "geno_r2": geno_r2, "cross_r2": cross_r2}


def _calibrate_censor_rate(event_rates: np.ndarray, censor_rate: float) -> float:
    """Bisect the censor-clock rate so that the expected fraction of
    samples whose censor time precedes their event time hits the target."""
    if censor_rate <= 0:
        return 0.0

    def expected(rate_c: float) -> float:
        return float(np.mean(rate_c / (rate_c + event_rates)))

    lo, hi = 1e-9, 1e9
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if expected(mid) < censor_rate:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def synthesize_cohort(
    n_samples: int,
    n_patches: int,
    dim: int,
    signal: str,
    censor_rate: float,
    seed: int,
    out_dir,
    folds: int = 5,
    group_sizes: tuple[int, ...] = DEFAULT_GROUP_SIZES,
) -> str:
    """Generate a synthetic multimodal cohort and return the manifest path.

    ``signal`` picks where the latent risk is recoverable from:

    * ``patho``: a risk-scaled direction is added to a random subset of
      patch tokens; genomics is noise,
    * ``geno``: the risk is written into two genomic groups; patches are
      noise,
    * ``cross``: pathology carries one latent factor, genomics another,
      and the risk is their product, so neither modality alone predicts
      it linearly (enforced by a generation-time self test).

    Event times are exponential with rate exp(risk); censoring uses an
    independent exponential clock calibrated to the requested rate.
    """
    if n_samples < 10:
        raise ConfigError(f"need at least 10 samples, got {n_samples}")
    if not 0.0 <= censor_rate <= 0.9:
        raise ConfigError(f"censor_rate must be in [0, 0.9], got {censor_rate}")
    if signal not in SIGNALS:
        raise ConfigError(f"signal must be one of {SIGNALS}, got '{signal}'")
    if n_patches < 1 or dim < 1:
        raise ConfigError("n_patches and dim must be positive")

    os.makedirs(out_dir, exist_ok=True)
    cohort_rng = rng_stream(seed ^ _COHORT_STREAM_SALT)
    direction = cohort_rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)

    n_informative = max(1, int(round(PATCH_INFORMATIVE_FRACTION * n_patches)))
    streams = [rng_stream(seed ^ i) for i in range(n_samples)]

    factors = np.empty((n_samples, 2))
    uniforms = np.empty((n_samples, 2))
    for i, rng in enumerate(streams):
        factors[i] = rng.standard_normal(2)
        uniforms[i] = rng.random(2)
    s_factor = _bounded_factor(factors[:, 0])
    q_factor = _bounded_factor(factors[:, 1])
    if signal == "patho":
        risks = MARGINAL_RISK_GAIN * s_factor
    elif signal == "geno":
        risks = MARGINAL_RISK_GAIN * q_factor
    else:
        risks = CROSS_RISK_GAIN * s_factor * q_factor

    event_rates = np.exp(risks)
    event_times = -np.log1p(-uniforms[:, 0]) / event_rates * TIME_SCALE_DAYS
    event_times = np.maximum(event_times, 1e-6)
    censor_clock = _calibrate_censor_rate(event_rates, censor_rate)
    if censor_clock > 0:
        censor_times = -np.log1p(-uniforms[:, 1]) / censor_clock * TIME_SCALE_DAYS
        censor_times = np.maximum(censor_times, 1e-6)
    else:
        censor_times = np.full(n_samples, np.inf)
    censored = censor_times < event_times
    observed = np.minimum(event_times, censor_times)

    rows: list[ManifestRow] = []
    latents: list[SampleLatents] = []
    patch_means = np.empty((n_samples, dim))
    group_means = np.empty((n_samples, N_GROUPS))
    for i, rng in enumerate(streams):
        sample_id = f"s{i:04d}"
        patches = PATCH_NOISE * rng.standard_normal((n_patches, dim))
        if signal in ("patho", "cross"):
            carried = risks[i] if signal == "patho" else s_factor[i]
            chosen = rng.choice(n_patches, size=n_informative, replace=False)
            patches[chosen] += PATCH_AMPLITUDE * carried * direction
        groups = []
        for g, size in enumerate(group_sizes):
            values = GROUP_NOISE * rng.standard_normal(size)
            if signal in ("geno", "cross") and g in TARGET_GROUPS:
                carried = risks[i] if signal == "geno" else q_factor[i]
                values += GROUP_AMPLITUDE * carried
            groups.append(values)

        patho_rel = f"{sample_id}.patho.mmef"
        geno_rel = f"{sample_id}.geno.mmeg"
        write_feature_file(os.path.join(out_dir, patho_rel), patches)
        write_genomic_file(os.path.join(out_dir, geno_rel), GenomicGroups(tuple(groups)))
        rows.append(
            ManifestRow(
                sample_id=sample_id,
                patho_path=patho_rel,
                geno_path=geno_rel,
                raw_time=float(observed[i]),
                censored=bool(censored[i]),
            )
        )
        latents.append(
            SampleLatents(
                sample_id,
                float(risks[i]),
                float(s_factor[i]),
                float(q_factor[i]),
                float(event_times[i]),
                float(censor_times[i]),
            )
        )
        patch_means[i] = patches.mean(axis=0)
        group_means[i] = [g.mean() for g in groups]

    fold_ids = kfold_split(rows, k=folds, seed=seed)
    rows = [replace(row, fold=fold) for row, fold in zip(rows, fold_ids)]

    # The held-out R2 bounds need enough samples to mean anything; tiny
    # cohorts (fit halves smaller than the regressor count) are exempt.
    if signal == "cross" and n_samples >= 50:
        report = cross_signal_self_test(patch_means, group_means, direction, risks)
        if report["patho_r2"] > 0.1 or report["geno_r2"] > 0.1:
            raise DataError(f"cross cohort leaks a marginal signal: {report}")
        if report["cross_r2"] < 0.8:
            raise DataError(f"cross cohort interaction is not recoverable: {report}")

    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, rows)
    with open(os.path.join(out_dir, "latents.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "risk", "patho_factor", "geno_factor",
                         "event_time", "censor_time"])
        for item in latents:
            writer.writerow(
                [item.sample_id, repr(item.risk), repr(item.patho_factor),
                 repr(item.geno_factor), repr(item.event_time), repr(item.censor_time)]
            )
    return manifest_path
