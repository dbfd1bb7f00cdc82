"""Panel containers and long-format CSV input/output.

The canonical on-disk format is a long CSV: one row per subject-occasion,
with a subject id column, a 1-based occasion column, one column per outcome
channel, and one column per covariate.  Occasions for each subject must be
exactly ``1..t_i`` with no gaps or duplicates; a covariate column may be
referenced by several designs (channel or hazard) and is then shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from .exceptions import DomainError, GapError, SchemaError, ShapeError
from .model import BERNOULLI, GAUSSIAN, ChannelSpec, ModelSpec, ReportNames


@dataclass(frozen=True)
class ChannelColumns:
    """Schema entry for one outcome channel: CSV column, family, covariates."""

    name: str
    family: str
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.family not in (GAUSSIAN, BERNOULLI):
            raise SchemaError(f"unknown channel family {self.family!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))


@dataclass(frozen=True)
class PanelSchema:
    """Mapping from CSV columns to the model's designs."""

    channels: tuple[ChannelColumns, ...]
    hazard_covariates: tuple[str, ...] = ()
    subject_col: str = "subject"
    occasion_col: str = "occasion"
    horizon: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "hazard_covariates", tuple(self.hazard_covariates))
        if not self.channels:
            raise SchemaError("schema must declare at least one outcome channel")
        channel_names = [c.name for c in self.channels]
        if len(set(channel_names)) != len(channel_names):
            raise SchemaError("duplicate channel names in schema")
        reserved = {self.subject_col, self.occasion_col}
        covariates = set(self.hazard_covariates)
        for c in self.channels:
            covariates.update(c.covariates)
        clash = (set(channel_names) | reserved) & covariates | (set(channel_names) & reserved)
        if clash:
            raise SchemaError(f"column names used in conflicting roles: {sorted(clash)}")
        if self.horizon is not None and self.horizon < 1:
            raise SchemaError("horizon must be >= 1")

    def model_spec(
        self, n_states: int, hazard_link: str = "logit", share_gamma: bool = False
    ) -> ModelSpec:
        """Dimensional model specification implied by this schema."""
        return ModelSpec(
            n_states=n_states,
            channels=tuple(
                ChannelSpec(family=c.family, n_covariates=len(c.covariates))
                for c in self.channels
            ),
            n_hazard_covariates=len(self.hazard_covariates),
            hazard_link=hazard_link,
            share_gamma=share_gamma,
        )


@dataclass(frozen=True)
class SubjectRecord:
    """All observed rows of one subject, already split by design."""

    subject_id: str
    outcomes: np.ndarray                      # (t_i, r)
    channel_covariates: tuple[np.ndarray, ...]  # one (t_i, p_h) per channel
    hazard_covariates: np.ndarray             # (t_i, q)

    @property
    def n_occasions(self) -> int:
        return self.outcomes.shape[0]


@dataclass(frozen=True)
class StackedPanel:
    """All subjects' rows concatenated, for vectorised computation.

    Row blocks follow dataset subject order; ``offsets[i]:offsets[i+1]``
    delimits subject ``i`` and ``occasion`` is 1-based within subject.
    """

    subject_index: np.ndarray
    occasion: np.ndarray
    outcomes: np.ndarray
    channel_covariates: tuple[np.ndarray, ...]
    hazard_covariates: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray
    horizon: int

    @property
    def n_subjects(self) -> int:
        return self.lengths.shape[0]

    @property
    def is_exit_row(self) -> np.ndarray:
        """True where the row is the subject's last observed occasion."""
        return self.occasion == self.lengths[self.subject_index]


@dataclass(eq=False)
class PanelDataset:
    """A loaded panel: subjects plus naming metadata.

    Treated as immutable; transformations return new instances.
    """

    horizon: int
    subjects: tuple[SubjectRecord, ...]
    channel_names: tuple[str, ...]
    channel_covariate_names: tuple[tuple[str, ...], ...]
    hazard_covariate_names: tuple[str, ...]

    def __post_init__(self):
        self.subjects = tuple(self.subjects)
        self.channel_names = tuple(self.channel_names)
        self.channel_covariate_names = tuple(
            tuple(t) for t in self.channel_covariate_names
        )
        self.hazard_covariate_names = tuple(self.hazard_covariate_names)
        if self.horizon < 1:
            raise DomainError("horizon must be >= 1")
        r = len(self.channel_names)
        if len(self.channel_covariate_names) != r:
            raise ShapeError("channel_covariate_names arity mismatch")
        q = len(self.hazard_covariate_names)
        for rec in self.subjects:
            t = rec.n_occasions
            if not 1 <= t <= self.horizon:
                raise DomainError(
                    f"subject {rec.subject_id!r} has {t} occasions, horizon {self.horizon}"
                )
            if rec.outcomes.shape != (t, r):
                raise ShapeError(f"subject {rec.subject_id!r} outcome block malformed")
            if len(rec.channel_covariates) != r:
                raise ShapeError(f"subject {rec.subject_id!r} covariate blocks malformed")
            for h, names in enumerate(self.channel_covariate_names):
                if rec.channel_covariates[h].shape != (t, len(names)):
                    raise ShapeError(
                        f"subject {rec.subject_id!r} channel {h} covariates malformed"
                    )
            if rec.hazard_covariates.shape != (t, q):
                raise ShapeError(f"subject {rec.subject_id!r} hazard covariates malformed")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    def report_names(self) -> ReportNames:
        return ReportNames(
            channel_names=self.channel_names,
            channel_covariate_names=self.channel_covariate_names,
            hazard_covariate_names=self.hazard_covariate_names,
        )

    @cached_property
    def stacked(self) -> StackedPanel:
        lengths = np.array([rec.n_occasions for rec in self.subjects], dtype=int)
        offsets = np.concatenate(([0], np.cumsum(lengths)))
        subject_index = np.repeat(np.arange(self.n), lengths)
        occasion = np.concatenate([np.arange(1, t + 1) for t in lengths])
        outcomes = (
            np.concatenate([rec.outcomes for rec in self.subjects])
            if self.subjects
            else np.empty((0, self.n_channels))
        )
        channel_covariates = tuple(
            np.concatenate([rec.channel_covariates[h] for rec in self.subjects])
            for h in range(self.n_channels)
        )
        hazard_covariates = np.concatenate(
            [rec.hazard_covariates for rec in self.subjects]
        )
        return StackedPanel(
            subject_index=subject_index,
            occasion=occasion,
            outcomes=outcomes,
            channel_covariates=channel_covariates,
            hazard_covariates=hazard_covariates,
            offsets=offsets,
            lengths=lengths,
            horizon=self.horizon,
        )


# ---------------------------------------------------------------------------
# loading and writing


def _covariate_union(schema: PanelSchema) -> list[str]:
    seen: list[str] = []
    for c in schema.channels:
        for name in c.covariates:
            if name not in seen:
                seen.append(name)
    for name in schema.hazard_covariates:
        if name not in seen:
            seen.append(name)
    return seen


def load_panel(path, schema: PanelSchema) -> PanelDataset:
    """Read a long-format CSV into a :class:`PanelDataset`.

    Subjects are ordered lexicographically by id; within a subject, rows by
    occasion.  Loading twice, or loading a row-shuffled copy of the same
    file, yields identical datasets.

    Raises
    ------
    SchemaError
        Missing columns, non-integer occasions, or horizon violations.
    GapError
        A subject whose occasions are not exactly ``1..t_i``.
    DomainError
        Non-finite values, or non-binary values in a bernoulli channel.
    """
    df = pd.read_csv(path)
    needed = [schema.subject_col, schema.occasion_col]
    needed += [c.name for c in schema.channels]
    needed += _covariate_union(schema)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")

    occ_raw = df[schema.occasion_col]
    occ_num = pd.to_numeric(occ_raw, errors="coerce")
    if occ_num.isna().any() or (occ_num != occ_num.round()).any():
        raise SchemaError(f"column {schema.occasion_col!r} must hold integer occasions")
    df = df.assign(**{schema.occasion_col: occ_num.astype(int)})

    for col in [c.name for c in schema.channels] + _covariate_union(schema):
        values = pd.to_numeric(df[col], errors="coerce")
        if values.isna().any() or not np.isfinite(values.to_numpy(dtype=float)).all():
            raise DomainError(f"column {col!r} contains missing or non-finite values")
        df[col] = values.astype(float)
    for c in schema.channels:
        if c.family == BERNOULLI and not df[c.name].isin((0.0, 1.0)).all():
            raise DomainError(f"bernoulli channel {c.name!r} has values outside {{0, 1}}")

    subjects: list[SubjectRecord] = []
    ids = sorted(df[schema.subject_col].astype(str).unique())
    df = df.assign(_sid=df[schema.subject_col].astype(str))
    grouped = dict(tuple(df.groupby("_sid", sort=True)))
    max_t = 0
    for sid in ids:
        block = grouped[sid].sort_values(schema.occasion_col)
        occ = block[schema.occasion_col].to_numpy()
        t = occ.shape[0]
        if not np.array_equal(occ, np.arange(1, t + 1)):
            raise GapError(
                f"subject {sid!r}: occasions must be exactly 1..t_i "
                f"(gap or duplicate found)"
            )
        max_t = max(max_t, t)
        outcomes = block[[c.name for c in schema.channels]].to_numpy(dtype=float)
        channel_covs = tuple(
            block[list(c.covariates)].to_numpy(dtype=float).reshape(t, len(c.covariates))
            for c in schema.channels
        )
        hazard_covs = (
            block[list(schema.hazard_covariates)]
            .to_numpy(dtype=float)
            .reshape(t, len(schema.hazard_covariates))
        )
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                outcomes=outcomes,
                channel_covariates=channel_covs,
                hazard_covariates=hazard_covs,
            )
        )
    if not subjects:
        raise SchemaError("no subjects found in input")
    horizon = schema.horizon if schema.horizon is not None else max_t
    if max_t > horizon:
        raise SchemaError(
            f"declared horizon {horizon} but a subject has {max_t} occasions"
        )
    return PanelDataset(
        horizon=horizon,
        subjects=tuple(subjects),
        channel_names=tuple(c.name for c in schema.channels),
        channel_covariate_names=tuple(c.covariates for c in schema.channels),
        hazard_covariate_names=schema.hazard_covariates,
    )


def write_panel(
    data: PanelDataset,
    path,
    subject_col: str = "subject",
    occasion_col: str = "occasion",
) -> None:
    """Write the long-format CSV that :func:`load_panel` reads back.

    A covariate referenced by several designs is written once; its values are
    identical across designs by construction.
    """
    # name -> (design kind, channel index, column index)
    location: dict[str, tuple[str, int, int]] = {}
    for h, names in enumerate(data.channel_covariate_names):
        for j, name in enumerate(names):
            location.setdefault(name, ("channel", h, j))
    for j, name in enumerate(data.hazard_covariate_names):
        location.setdefault(name, ("hazard", 0, j))

    frames = []
    for rec in data.subjects:
        t = rec.n_occasions
        cols: dict[str, np.ndarray | list] = {
            subject_col: [rec.subject_id] * t,
            occasion_col: np.arange(1, t + 1),
        }
        for h, name in enumerate(data.channel_names):
            cols[name] = rec.outcomes[:, h]
        for name, (kind, h, j) in location.items():
            block = rec.channel_covariates[h] if kind == "channel" else rec.hazard_covariates
            cols[name] = block[:, j]
        frames.append(pd.DataFrame(cols))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# transformations and summaries


@dataclass(frozen=True)
class CenteringReport:
    """Grand means subtracted from each centered covariate."""

    means: dict[str, float]


def center_continuous(data: PanelDataset, names) -> tuple[PanelDataset, CenteringReport]:
    """Zero-center named covariates by their grand mean over observed rows.

    The same shift is applied in every design that references a name, so
    shared columns stay shared.  Binary (0/1) covariates are refused.
    """
    names = list(names)
    stacked = data.stacked
    positions: dict[str, list[tuple[str, int, int]]] = {n: [] for n in names}
    for h, cov_names in enumerate(data.channel_covariate_names):
        for j, name in enumerate(cov_names):
            if name in positions:
                positions[name].append(("channel", h, j))
    for j, name in enumerate(data.hazard_covariate_names):
        if name in positions:
            positions[name].append(("hazard", 0, j))
    means: dict[str, float] = {}
    for name in names:
        if not positions[name]:
            raise SchemaError(f"covariate {name!r} not present in any design")
        kind, h, j = positions[name][0]
        column = (
            stacked.channel_covariates[h][:, j]
            if kind == "channel"
            else stacked.hazard_covariates[:, j]
        )
        if np.isin(column, (0.0, 1.0)).all():
            raise DomainError(f"covariate {name!r} is binary; centering refused")
        means[name] = float(column.mean())

    new_subjects = []
    for rec in data.subjects:
        ch = [b.copy() for b in rec.channel_covariates]
        hz = rec.hazard_covariates.copy()
        for name in names:
            for kind, h, j in positions[name]:
                if kind == "channel":
                    ch[h][:, j] -= means[name]
                else:
                    hz[:, j] -= means[name]
        new_subjects.append(
            SubjectRecord(
                subject_id=rec.subject_id,
                outcomes=rec.outcomes,
                channel_covariates=tuple(ch),
                hazard_covariates=hz,
            )
        )
    out = PanelDataset(
        horizon=data.horizon,
        subjects=tuple(new_subjects),
        channel_names=data.channel_names,
        channel_covariate_names=data.channel_covariate_names,
        hazard_covariate_names=data.hazard_covariate_names,
    )
    return out, CenteringReport(means=means)


@dataclass(frozen=True)
class DropoutSummary:
    """Distribution of observed exit occasions across subjects."""

    counts: dict[int, int]
    fractions: dict[int, float]
    n: int
    horizon: int

    @property
    def n_completers(self) -> int:
        return self.counts.get(self.horizon, 0)


def dropout_summary(data: PanelDataset) -> DropoutSummary:
    """Fraction of subjects exiting at each occasion ``1..s``; sums to one."""
    counts = {t: 0 for t in range(1, data.horizon + 1)}
    for rec in data.subjects:
        counts[rec.n_occasions] += 1
    n = data.n
    fractions = {t: c / n for t, c in counts.items()}
    return DropoutSummary(counts=counts, fractions=fractions, n=n, horizon=data.horizon)


def validate_panel(data: PanelDataset, spec: ModelSpec) -> None:
    """Check that a dataset's arities match a model specification."""
    if data.n_channels != spec.r:
        raise ShapeError(f"dataset has {data.n_channels} channels, spec has {spec.r}")
    for h, ch in enumerate(spec.channels):
        width = len(data.channel_covariate_names[h])
        if width != ch.n_covariates:
            raise ShapeError(
                f"channel {h}: dataset has {width} covariates, spec has {ch.n_covariates}"
            )
        if ch.family == BERNOULLI:
            col = data.stacked.outcomes[:, h]
            if not np.isin(col, (0.0, 1.0)).all():
                raise DomainError(
                    f"channel {h} declared bernoulli but has non-binary values"
                )
    if len(data.hazard_covariate_names) != spec.q:
        raise ShapeError(
            f"dataset has {len(data.hazard_covariate_names)} hazard covariates, "
            f"spec has {spec.q}"
        )


def panels_equal(a: PanelDataset, b: PanelDataset, atol: float = 0.0) -> bool:
    """Structural equality of two datasets (used by round-trip tests)."""
    if (
        a.horizon != b.horizon
        or a.channel_names != b.channel_names
        or a.channel_covariate_names != b.channel_covariate_names
        or a.hazard_covariate_names != b.hazard_covariate_names
        or a.n != b.n
    ):
        return False
    for ra, rb in zip(a.subjects, b.subjects):
        if ra.subject_id != rb.subject_id or ra.n_occasions != rb.n_occasions:
            return False
        if not np.allclose(ra.outcomes, rb.outcomes, atol=atol, rtol=0):
            return False
        for ca, cb in zip(ra.channel_covariates, rb.channel_covariates):
            if not np.allclose(ca, cb, atol=atol, rtol=0):
                return False
        if not np.allclose(ra.hazard_covariates, rb.hazard_covariates, atol=atol, rtol=0):
            return False
    return True
