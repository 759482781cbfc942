"""Input encoding, prior statistics and random masks.

Every site owns a block of input slots followed by one observed-flag slot:

* categorical (arity k): k probability slots holding a one-hot vector when
  observed, the prior marginal otherwise;
* continuous: one slot holding the standardised value when observed, 0 (the
  standardised prior mean) otherwise.

Network outputs use one block per site as well: k logits for a categorical
site, one standardised mean for a continuous site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .program import Evidence, ProgramSpec, check_evidence, sample_prior

STD_FLOOR = 1e-6
DEFAULT_PRIOR_SAMPLES = 100_000


@dataclass(frozen=True)
class EncodingLayout:
    in_slices: tuple[slice, ...]  # value slots per site
    flag_index: tuple[int, ...]
    out_slices: tuple[slice, ...]
    width: int  # input width D
    out_width: int  # total head width K
    categorical: tuple[bool, ...]
    # (arity, site indices, column index matrix) for vectorised losses
    cat_groups: tuple[tuple[int, np.ndarray, np.ndarray], ...]
    cont_sites: np.ndarray
    cont_cols: np.ndarray

    @classmethod
    def for_program(cls, program: ProgramSpec) -> "EncodingLayout":
        in_slices, flags, out_slices, cats = [], [], [], []
        pos = out = 0
        for site in program.sites:
            width = site.arity if site.is_categorical else 1
            in_slices.append(slice(pos, pos + width))
            flags.append(pos + width)
            pos += width + 1
            out_slices.append(slice(out, out + width))
            out += width
            cats.append(site.is_categorical)
        groups = {}
        for i, site in enumerate(program.sites):
            if site.is_categorical:
                groups.setdefault(site.arity, []).append(i)
        cat_groups = tuple(
            (k, np.array(idx), np.array([np.arange(out_slices[i].start, out_slices[i].stop) for i in idx]))
            for k, idx in sorted(groups.items())
        )
        cont = np.array([i for i, c in enumerate(cats) if not c], dtype=np.intp)
        return cls(
            tuple(in_slices),
            tuple(flags),
            tuple(out_slices),
            pos,
            out,
            tuple(cats),
            cat_groups,
            cont,
            np.array([out_slices[i].start for i in cont], dtype=np.intp),
        )

    @property
    def n_sites(self) -> int:
        return len(self.in_slices)

    def site_of_input_slot(self, slot: int) -> int:
        for i, (sl, flag) in enumerate(zip(self.in_slices, self.flag_index)):
            if sl.start <= slot <= flag:
                return i
        raise IndexError(slot)


@dataclass(frozen=True)
class PriorStats:
    probs: tuple  # per site: prior marginal vector, or None for continuous sites
    mean: np.ndarray  # per site; 0 for categorical
    std: np.ndarray  # per site; 1 for categorical
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "probs": [None if p is None else p.tolist() for p in self.probs],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PriorStats":
        return cls(
            tuple(None if p is None else np.array(p, dtype=float) for p in obj["probs"]),
            np.array(obj["mean"], dtype=float),
            np.array(obj["std"], dtype=float),
            int(obj["n_samples"]),
        )


@dataclass(frozen=True)
class Mask:
    masked: frozenset[int]


def compute_prior_stats(
    program: ProgramSpec,
    n_samples: int = DEFAULT_PRIOR_SAMPLES,
    rng: np.random.Generator | None = None,
) -> PriorStats:
    if n_samples < 1000:
        raise ValidationError("prior statistics need at least 1000 samples")
    if rng is None:
        rng = np.random.default_rng(0)
    values = sample_prior(program, n_samples, rng)
    probs, mean, std = [], np.zeros(program.n_sites), np.ones(program.n_sites)
    for i, site in enumerate(program.sites):
        if site.is_categorical:
            counts = np.bincount(values[:, i].astype(np.intp), minlength=site.arity)
            probs.append(counts / n_samples)
        else:
            probs.append(None)
            mean[i] = values[:, i].mean()
            std[i] = max(values[:, i].std(), STD_FLOOR)
    return PriorStats(tuple(probs), mean, std, n_samples)


def sample_mask(n_sites: int, rng: np.random.Generator) -> Mask:
    """Mask ``i ~ U{0..N}`` sites chosen uniformly without replacement."""
    if n_sites < 1:
        raise ValidationError("need at least one site")
    size = int(rng.integers(0, n_sites + 1))
    return Mask(frozenset(int(j) for j in rng.choice(n_sites, size=size, replace=False)))


def sample_masks(n_sites: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`sample_mask`: boolean ``(batch, N)``, True where masked."""
    sizes = rng.integers(0, n_sites + 1, size=batch)
    ranks = np.argsort(rng.random((batch, n_sites)), axis=1).argsort(axis=1)
    return ranks < sizes[:, None]


def empty_encoding(layout: EncodingLayout, stats: PriorStats) -> np.ndarray:
    x = np.zeros(layout.width)
    for i, sl in enumerate(layout.in_slices):
        if layout.categorical[i]:
            x[sl] = stats.probs[i]
    return x


def encode_batch(
    layout: EncodingLayout, stats: PriorStats, values: np.ndarray, observed: np.ndarray
) -> np.ndarray:
    """Encode rows of ``values`` with ``observed[r, i]`` deciding which sites are visible.

    Unobserved entries of ``values`` are ignored and may hold anything (NaN included).
    """
    n = values.shape[0]
    x = np.empty((n, layout.width))
    for i, sl in enumerate(layout.in_slices):
        obs = observed[:, i]
        if layout.categorical[i]:
            k = sl.stop - sl.start
            states = np.where(obs, np.nan_to_num(values[:, i]), 0).astype(np.intp)
            block = np.where(obs[:, None], np.arange(k) == states[:, None], stats.probs[i])
            x[:, sl] = block
        else:
            z = (values[:, i] - stats.mean[i]) / stats.std[i]
            x[:, sl.start] = np.where(obs, z, 0.0)
        x[:, layout.flag_index[i]] = obs
    return x


def set_observed(
    layout: EncodingLayout, stats: PriorStats, x: np.ndarray, site: int, values: np.ndarray, categorical: bool
) -> None:
    """Overwrite one site's block in an encoded batch as observed with ``values``."""
    sl = layout.in_slices[site]
    if categorical:
        x[:, sl] = np.arange(sl.stop - sl.start) == values.astype(np.intp)[:, None]
    else:
        x[:, sl.start] = (values - stats.mean[site]) / stats.std[site]
    x[:, layout.flag_index[site]] = 1.0


def encode(program: ProgramSpec, layout: EncodingLayout, stats: PriorStats, evidence: Evidence) -> np.ndarray:
    check_evidence(program, evidence)
    values = np.zeros((1, program.n_sites))
    observed = np.zeros((1, program.n_sites), dtype=bool)
    for i, v in evidence.values.items():
        values[0, i] = v
        observed[0, i] = True
    return encode_batch(layout, stats, values, observed)[0]


def targets(layout: EncodingLayout, stats: PriorStats, values: np.ndarray) -> np.ndarray:
    """State index per categorical site, standardised value per continuous site."""
    cats = np.array(layout.categorical)
    return np.where(cats, values, (values - stats.mean) / stats.std)


def make_training_batch(
    layout: EncodingLayout, stats: PriorStats, values: np.ndarray, masked: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return encode_batch(layout, stats, values, ~masked), targets(layout, stats, values)


def make_training_pair(
    program: ProgramSpec, layout: EncodingLayout, stats: PriorStats, sample, mask: Mask
) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(sample, dtype=float).reshape(1, -1)
    masked = np.zeros((1, program.n_sites), dtype=bool)
    masked[0, list(mask.masked)] = True
    x, t = make_training_batch(layout, stats, values, masked)
    return x[0], t[0]
