"""Peak-table data structures and CSV ingestion for left-censored peak lists.

The observed data for n samples and p peaks is a log-intensity matrix, a
matrix of censoring indicators (delta = 1 observed, 0 below the limit of
detection), one LOD threshold per peak and a peak-to-cluster map.  Censored
cells are stored at the LOD value of their peak.

CSV schemas (UTF-8, comma separated, '.' decimal point):
    peaks:  sample_id,peak_id,cluster_id,intensity,observed
    labels: sample_id,outcome
One peak row per (sample, peak); missing combinations are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

PEAK_COLUMNS = ["sample_id", "peak_id", "cluster_id", "intensity", "observed"]
LABEL_COLUMNS = ["sample_id", "outcome"]
LOD_POLICIES = ("given", "min_observed")


@dataclass(frozen=True)
class PeakTable:
    """Immutable n_samples x n_peaks peak list with censoring metadata.

    censored holds the indicators delta (1 = observed, 0 = below LOD);
    cluster_of maps each peak to a dense cluster index in 1..C, with
    cluster_ids recording the original identifiers in ascending order.
    Censored cells of intensities are stored at lod[peak].
    """

    intensities: np.ndarray
    censored: np.ndarray
    lod: np.ndarray
    cluster_of: np.ndarray
    sample_ids: tuple[str, ...]
    peak_ids: tuple[str, ...]
    cluster_ids: tuple[int, ...]

    @property
    def n_samples(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_peaks(self) -> int:
        return self.intensities.shape[1]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    def censoring_rate(self) -> float:
        """Overall fraction of cells below the LOD, 1 - mean(delta)."""
        return float(1.0 - self.censored.mean())

    def cluster_index(self, cluster_id: int) -> int:
        """Dense 1..C index for an original cluster id."""
        try:
            return self.cluster_ids.index(int(cluster_id)) + 1
        except ValueError:
            raise KeyError(f"unknown cluster id {cluster_id!r}") from None

    def peak_columns(self, cluster_id: int) -> np.ndarray:
        """Column indices of the cluster's peaks, in stored (mass) order."""
        dense = self.cluster_index(cluster_id)
        return np.flatnonzero(self.cluster_of == dense)


@dataclass(frozen=True)
class Labels:
    """Binary class outcome per sample, aligned with a PeakTable row axis."""

    outcome: np.ndarray
    sample_ids: tuple[str, ...]

    @property
    def n_samples(self) -> int:
        return self.outcome.size


@dataclass(frozen=True)
class ClusterView:
    """Per-cluster mean-intensity pattern over a reference sample set."""

    cluster_id: int
    peak_indices: np.ndarray
    mean_pattern: np.ndarray
    grand_mean: float


@dataclass(frozen=True)
class ClusterData:
    """One cluster's cells for a set of patients, ready for estimation.

    y and delta are (n_patients, k); xbar is the covariate pattern (the
    mean-intensity pattern chosen by the caller, which for prediction-style
    fits may come from a different sample set than the rows) and thresholds
    are the per-peak LOD values governing the censored cells.
    """

    y: np.ndarray
    delta: np.ndarray
    xbar: np.ndarray
    thresholds: np.ndarray
    cluster_id: int

    @property
    def n_patients(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]


def _peak_sort_key(peak_id: str):
    try:
        return (0, int(peak_id), "")
    except ValueError:
        return (1, 0, peak_id)


def validate_peak_table(table: PeakTable) -> None:
    """Raise ValueError when a storage invariant is broken."""
    n, p = table.intensities.shape
    if table.censored.shape != (n, p):
        raise ValueError("censoring indicator shape does not match intensities")
    if table.lod.shape != (p,) or table.cluster_of.shape != (p,):
        raise ValueError("per-peak vectors must have one entry per peak")
    if len(table.sample_ids) != n or len(table.peak_ids) != p:
        raise ValueError("identifier lengths do not match the matrix")
    if not np.isin(table.censored, (0, 1)).all():
        raise ValueError("censoring indicators must be 0 or 1")
    if not np.isfinite(table.intensities).all() or not np.isfinite(table.lod).all():
        raise ValueError("intensities and LOD values must be finite")
    cens = table.censored == 0
    stored = table.intensities
    if not np.all(stored[cens] == np.broadcast_to(table.lod, (n, p))[cens]):
        raise ValueError("censored cells must be stored at their peak's LOD value")
    obs = ~cens
    if np.any(stored[obs] < np.broadcast_to(table.lod, (n, p))[obs]):
        raise ValueError("observed intensities must not lie below the LOD")
    counts = np.bincount(table.cluster_of, minlength=table.n_clusters + 1)[1:]
    if table.n_clusters == 0 or np.any(counts == 0):
        raise ValueError("every cluster id in 1..C must own at least one peak")
    if np.any(np.diff(table.cluster_of) < 0):
        raise ValueError("peaks must be stored contiguously in cluster order")


def ingest_peak_table(path, lod_policy: str = "min_observed",
                      pre_logged: bool = True) -> PeakTable:
    """Read the peak CSV into a validated PeakTable.

    lod_policy 'min_observed' recomputes each peak's LOD as the minimal
    observed intensity among all samples and overwrites censored cells with
    it; 'given' trusts the stored censored values as the threshold (and
    falls back to the observed minimum for fully observed peaks).  When
    pre_logged is false, intensities must be strictly positive and are
    natural-log transformed.
    """
    if lod_policy not in LOD_POLICIES:
        raise ValueError(f"lod_policy must be one of {LOD_POLICIES}")
    df = pd.read_csv(path, dtype={"sample_id": str, "peak_id": str})
    missing = [c for c in PEAK_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"peak CSV is missing columns {missing}")
    if df[PEAK_COLUMNS].isna().any().any():
        raise ValueError("peak CSV contains empty or malformed cells")
    if not np.isin(df["observed"].to_numpy(), (0, 1)).all():
        raise ValueError("observed must be 0 or 1")

    sample_ids = list(dict.fromkeys(df["sample_id"]))
    peak_meta = df.drop_duplicates("peak_id")[["peak_id", "cluster_id"]]
    if df.duplicated(["sample_id", "peak_id"]).any():
        raise ValueError("duplicate (sample_id, peak_id) rows")
    if df.groupby("sample_id").size().nunique() > 1:
        raise ValueError("inconsistent peak counts across samples")
    if df.groupby("peak_id")["cluster_id"].nunique().gt(1).any():
        raise ValueError("a peak_id maps to more than one cluster")

    order = sorted(
        peak_meta.itertuples(index=False),
        key=lambda r: (int(r.cluster_id), _peak_sort_key(str(r.peak_id))),
    )
    peak_ids = tuple(str(r.peak_id) for r in order)
    original_clusters = [int(r.cluster_id) for r in order]
    cluster_ids = tuple(sorted(set(original_clusters)))
    dense = {cid: i + 1 for i, cid in enumerate(cluster_ids)}
    cluster_of = np.array([dense[c] for c in original_clusters], dtype=np.int64)

    wide = df.pivot(index="sample_id", columns="peak_id", values="intensity")
    wide = wide.reindex(index=sample_ids, columns=list(peak_ids))
    obs_wide = df.pivot(index="sample_id", columns="peak_id", values="observed")
    obs_wide = obs_wide.reindex(index=sample_ids, columns=list(peak_ids))
    if wide.isna().any().any():
        raise ValueError("missing (sample, peak) rows are forbidden")
    intensities = wide.to_numpy(dtype=float)
    delta = obs_wide.to_numpy(dtype=np.int8)

    if not pre_logged:
        if np.any(intensities <= 0.0):
            raise ValueError("raw intensities must be strictly positive before the log transform")
        intensities = np.log(intensities)

    lod = np.empty(len(peak_ids), dtype=float)
    for j, pid in enumerate(peak_ids):
        col = intensities[:, j]
        obs = delta[:, j] == 1
        if lod_policy == "min_observed":
            if not obs.any():
                raise ValueError(
                    f"peak {pid!r} is censored in every sample; no observed minimum exists "
                    "under lod_policy='min_observed'"
                )
            lod[j] = col[obs].min()
            intensities[~obs, j] = lod[j]
        else:
            if (~obs).any():
                vals = np.unique(col[~obs])
                if vals.size > 1:
                    raise ValueError(
                        f"peak {pid!r} carries inconsistent censored values {vals.tolist()} "
                        "under lod_policy='given'"
                    )
                lod[j] = vals[0]
            else:
                lod[j] = col[obs].min()
            if obs.any() and col[obs].min() < lod[j]:
                raise ValueError(f"peak {pid!r} has observed intensities below its LOD")

    table = PeakTable(
        intensities=intensities,
        censored=delta,
        lod=lod,
        cluster_of=cluster_of,
        sample_ids=tuple(sample_ids),
        peak_ids=peak_ids,
        cluster_ids=cluster_ids,
    )
    validate_peak_table(table)
    return table


def write_peak_table(table: PeakTable, path) -> None:
    """Serialize to the peak CSV schema; a round trip is the identity."""
    original = {i + 1: cid for i, cid in enumerate(table.cluster_ids)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(PEAK_COLUMNS) + "\n")
        for i, sid in enumerate(table.sample_ids):
            for j, pid in enumerate(table.peak_ids):
                fh.write(
                    f"{sid},{pid},{original[int(table.cluster_of[j])]},"
                    f"{table.intensities[i, j]!r},{int(table.censored[i, j])}\n"
                )


def ingest_labels(path, sample_ids=None) -> Labels:
    """Read the labels CSV; when sample_ids is given, align to that order."""
    df = pd.read_csv(path, dtype={"sample_id": str})
    missing = [c for c in LABEL_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"labels CSV is missing columns {missing}")
    if df.duplicated("sample_id").any():
        raise ValueError("duplicate sample_id in labels CSV")
    if not np.isin(df["outcome"].to_numpy(), (0, 1)).all():
        raise ValueError("outcome must be 0 or 1")
    if sample_ids is not None:
        lookup = dict(zip(df["sample_id"], df["outcome"]))
        unknown = set(lookup) - set(sample_ids)
        absent = [s for s in sample_ids if s not in lookup]
        if unknown or absent:
            raise ValueError(
                f"labels do not match the peak table: unknown={sorted(unknown)}, missing={absent}"
            )
        outcome = np.array([lookup[s] for s in sample_ids], dtype=np.int8)
        return Labels(outcome=outcome, sample_ids=tuple(sample_ids))
    return Labels(outcome=df["outcome"].to_numpy(dtype=np.int8),
                  sample_ids=tuple(df["sample_id"]))


def write_labels(labels: Labels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(LABEL_COLUMNS) + "\n")
        for sid, g in zip(labels.sample_ids, labels.outcome):
            fh.write(f"{sid},{int(g)}\n")


def mean_pattern(table: PeakTable, cluster_id: int, reference_rows=None) -> ClusterView:
    """Mean-intensity pattern of a cluster over a reference sample set.

    Censored cells enter at their stored LOD value; reference_rows defaults
    to all samples.
    """
    idx = table.peak_columns(cluster_id)
    if reference_rows is None:
        rows = np.arange(table.n_samples)
    else:
        rows = np.asarray(reference_rows, dtype=int)
        if rows.size == 0:
            raise ValueError("reference_rows must be non-empty")
    pattern = table.intensities[np.ix_(rows, idx)].mean(axis=0)
    return ClusterView(
        cluster_id=int(cluster_id),
        peak_indices=idx,
        mean_pattern=pattern,
        grand_mean=float(pattern.mean()),
    )


def cluster_data(table: PeakTable, cluster_id: int, rows=None,
                 pattern: ClusterView | None = None) -> ClusterData:
    """Slice one cluster's cells for the given rows into a ClusterData.

    pattern supplies the covariate; by default it is the mean pattern over
    the same rows.  Pass a pattern computed elsewhere to summarize new
    samples under another population's covariate.
    """
    if rows is None:
        rows = np.arange(table.n_samples)
    else:
        rows = np.asarray(rows, dtype=int)
    if pattern is None:
        pattern = mean_pattern(table, cluster_id, rows)
    idx = table.peak_columns(cluster_id)
    return ClusterData(
        y=table.intensities[np.ix_(rows, idx)],
        delta=table.censored[np.ix_(rows, idx)],
        xbar=np.asarray(pattern.mean_pattern, dtype=float),
        thresholds=table.lod[idx],
        cluster_id=int(cluster_id),
    )


def subset_rows(table: PeakTable, rows) -> PeakTable:
    """Row-subset of a table; LOD thresholds are data and stay unchanged."""
    rows = np.asarray(rows, dtype=int)
    return replace(
        table,
        intensities=table.intensities[rows],
        censored=table.censored[rows],
        sample_ids=tuple(table.sample_ids[i] for i in rows),
    )


def concat_tables(a: PeakTable, b: PeakTable) -> PeakTable:
    """Stack two tables over the same peak set, as if ingested together.

    Per-peak LOD becomes the elementwise minimum of the two thresholds and
    censored cells are restored at the pooled value, mirroring a pooled
    min-observed ingestion.
    """
    if a.peak_ids != b.peak_ids or a.cluster_ids != b.cluster_ids:
        raise ValueError("tables must share an identical peak and cluster structure")
    if set(a.sample_ids) & set(b.sample_ids):
        raise ValueError("tables must have disjoint sample ids")
    lod = np.minimum(a.lod, b.lod)
    intensities = np.vstack([a.intensities, b.intensities])
    censored = np.vstack([a.censored, b.censored])
    cens = censored == 0
    intensities[cens] = np.broadcast_to(lod, intensities.shape)[cens]
    return PeakTable(
        intensities=intensities,
        censored=censored,
        lod=lod,
        cluster_of=a.cluster_of.copy(),
        sample_ids=a.sample_ids + b.sample_ids,
        peak_ids=a.peak_ids,
        cluster_ids=a.cluster_ids,
    )
