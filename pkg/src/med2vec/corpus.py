"""Corpus data model, file ingestion, splitting, grouping, and synthetic generation.

A corpus is a collection of patients, each an ordered sequence of visits, and
each visit an unordered set of code indices plus an optional demographic
vector.  Patients with fewer than two visits carry no sequential signal and
are excluded everywhere.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


class CorpusFormatError(ValueError):
    """An input file does not conform to the documented on-disk layout."""


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between code tokens and dense indices in [0, n_codes)."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(str(t) for t in self.tokens)
        if not tokens:
            raise ValueError("vocabulary must contain at least one token")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} in vocabulary")
            index[tok] = i
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token(self, index: int) -> str:
        return self.tokens[index]

    def content_hash(self) -> str:
        """SHA-256 over the ordered token list; identifies the code space."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Visit:
    """One encounter: a deduplicated set of code indices plus demographics."""

    codes: tuple[int, ...]
    demographics: tuple[float, ...] = ()

    def __post_init__(self):
        codes = tuple(sorted({int(c) for c in self.codes}))
        if not codes:
            raise ValueError("a visit must contain at least one code")
        if codes[0] < 0:
            raise ValueError("code indices must be non-negative")
        demo = tuple(float(x) for x in self.demographics)
        if not all(math.isfinite(x) for x in demo):
            raise ValueError("demographic entries must be finite")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "demographics", demo)

    @property
    def demo_dim(self) -> int:
        return len(self.demographics)


@dataclass(frozen=True)
class PatientRecord:
    """Temporally ordered visits of one patient (at least two)."""

    visits: tuple[Visit, ...]

    def __post_init__(self):
        visits = tuple(self.visits)
        if len(visits) < 2:
            raise ValueError("a patient record needs at least two visits")
        object.__setattr__(self, "visits", visits)

    def __len__(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class Corpus:
    """Patients plus the vocabulary their code indices refer to."""

    patients: tuple[PatientRecord, ...]
    vocabulary: Vocabulary

    def __post_init__(self):
        patients = tuple(self.patients)
        if not patients:
            raise ValueError("corpus must contain at least one patient")
        size = len(self.vocabulary)
        demo_dims = set()
        for p in patients:
            for v in p.visits:
                if v.codes[-1] >= size:
                    raise ValueError(
                        f"code index {v.codes[-1]} out of range for vocabulary of size {size}"
                    )
                demo_dims.add(v.demo_dim)
        if len(demo_dims) > 1:
            raise ValueError(f"inconsistent demographic lengths: {sorted(demo_dims)}")
        object.__setattr__(self, "patients", patients)

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def total_visits(self) -> int:
        return sum(len(p) for p in self.patients)

    @property
    def demo_dim(self) -> int:
        return self.patients[0].visits[0].demo_dim

    def iter_visits(self) -> Iterator[Visit]:
        """All visits in patient order, visit order preserved within a patient."""
        for patient in self.patients:
            yield from patient.visits


@dataclass(frozen=True)
class GrouperMap:
    """Many-to-one map from code indices to group indices in [0, n_groups)."""

    group_of: Mapping[int, int]
    n_groups: int

    def __post_init__(self):
        mapping = {int(c): int(g) for c, g in self.group_of.items()}
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        for c, g in mapping.items():
            if not 0 <= g < self.n_groups:
                raise ValueError(f"group index {g} for code {c} outside [0, {self.n_groups})")
        object.__setattr__(self, "group_of", mapping)

    @classmethod
    def identity(cls, n_codes: int) -> "GrouperMap":
        """Each code is its own group; grouped targets equal raw multi-hot."""
        return cls({i: i for i in range(n_codes)}, n_codes)

    def labels(self, n_codes: int) -> np.ndarray:
        """Dense group label per code index; raises if any code is unmapped."""
        out = np.empty(n_codes, dtype=np.int64)
        for c in range(n_codes):
            if c not in self.group_of:
                raise ValueError(f"code {c} has no group")
            out[c] = self.group_of[c]
        return out


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the latent-group generative process.

    ``transition_sharpness`` and ``within_group_affinity`` are odds: a patient
    stays in its current group between visits with probability s/(s+1), and a
    visit draws each code from the active group's pool with probability
    a/(a+1) (otherwise uniformly from the whole vocabulary).
    """

    n_patients: int = 300
    n_codes: int = 100
    n_groups: int = 10
    mean_visits_per_patient: float = 5.0
    mean_codes_per_visit: float = 4.0
    transition_sharpness: float = 3.0
    within_group_affinity: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or self.n_codes < 1 or self.n_groups < 1:
            raise ValueError("n_patients, n_codes and n_groups must be positive")
        if self.n_groups > self.n_codes:
            raise ValueError("n_groups must not exceed n_codes")
        if self.mean_visits_per_patient < 1 or self.mean_codes_per_visit < 1:
            raise ValueError("means must be >= 1")
        if self.transition_sharpness <= 0 or self.within_group_affinity <= 0:
            raise ValueError("sharpness and affinity must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def _parse_block_file(path: Path, parse_line) -> list[list]:
    """Read a patient-block file: one record per line, blank line ends a patient.

    ``parse_line(stripped_line, lineno)`` converts one non-blank line.  Lines
    starting with '#' are ignored.  Returns a list of patients, each a list of
    parsed rows.
    """
    patients: list[list] = []
    current: list = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            stripped = raw.strip()
            if stripped.startswith("#"):
                continue
            if not stripped:
                if current:
                    patients.append(current)
                    current = []
                continue
            current.append(parse_line(stripped, lineno))
    if current:
        patients.append(current)
    return patients


def _parse_visit_line(path: Path):
    def parse(line: str, lineno: int) -> list[str]:
        return line.split()

    return parse


def _parse_demo_line(path: Path):
    def parse(line: str, lineno: int) -> list[float]:
        try:
            values = [float(x) for x in line.split(",")]
        except ValueError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: malformed demographics row: {exc}") from None
        if not all(math.isfinite(x) for x in values):
            raise CorpusFormatError(f"{path}:{lineno}: non-finite demographic value")
        return values

    return parse


def _parse_label_line(path: Path):
    def parse(line: str, lineno: int) -> int:
        if line not in ("0", "1"):
            raise CorpusFormatError(f"{path}:{lineno}: label must be 0 or 1, got {line!r}")
        return int(line)

    return parse


def _build_corpus(
    token_patients: Sequence[Sequence[Sequence[str]]],
    demo_patients: Sequence[Sequence[Sequence[float]]] | None,
) -> Corpus:
    """Assemble a corpus from per-patient token lists, dropping short patients.

    The vocabulary is built from the retained visits in first-appearance
    order, which makes writing and re-loading a corpus a fixed point.
    """
    keep = [i for i, p in enumerate(token_patients) if len(p) >= 2]
    dropped = len(token_patients) - len(keep)
    if dropped:
        warnings.warn(f"dropped {dropped} patient(s) with fewer than 2 visits", stacklevel=3)
    if not keep:
        raise CorpusFormatError("empty corpus after dropping patients with fewer than 2 visits")

    index_of: dict[str, int] = {}
    tokens: list[str] = []
    patients: list[PatientRecord] = []
    for i in keep:
        visits = []
        for j, visit_tokens in enumerate(token_patients[i]):
            codes = []
            for tok in visit_tokens:
                if tok not in index_of:
                    index_of[tok] = len(tokens)
                    tokens.append(tok)
                codes.append(index_of[tok])
            demo = demo_patients[i][j] if demo_patients is not None else ()
            visits.append(Visit(tuple(codes), tuple(demo)))
        patients.append(PatientRecord(tuple(visits)))
    return Corpus(tuple(patients), Vocabulary(tuple(tokens)))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def load_corpus(visits_path: str | Path, demo_path: str | Path | None = None) -> Corpus:
    """Load a corpus from a visit file and an optional demographics file.

    Parameters
    ----------
    visits_path : path
        One visit per line as whitespace-separated code tokens; a blank line
        ends a patient; lines starting with '#' are ignored.
    demo_path : path, optional
        One comma-separated row of reals per visit, blank lines mirroring the
        patient boundaries of the visit file.  When omitted, visits carry an
        empty demographic vector.

    Raises
    ------
    CorpusFormatError
        On malformed rows (with the offending line number), on a structure
        mismatch between the two files, or when no patient has two visits.
    """
    visits_path = Path(visits_path)
    token_patients = _parse_block_file(visits_path, _parse_visit_line(visits_path))

    demo_patients = None
    if demo_path is not None:
        demo_path = Path(demo_path)
        demo_patients = _parse_block_file(demo_path, _parse_demo_line(demo_path))
        shape = [len(p) for p in token_patients]
        demo_shape = [len(p) for p in demo_patients]
        if shape != demo_shape:
            raise CorpusFormatError(
                f"demographic row count mismatch: visits have {shape} rows per patient, "
                f"demographics have {demo_shape}"
            )
        widths = {len(row) for p in demo_patients for row in p}
        if len(widths) > 1:
            raise CorpusFormatError(f"inconsistent demographic widths: {sorted(widths)}")

    return _build_corpus(token_patients, demo_patients)


def corpus_from_sequences(
    patients: Sequence[Sequence[Iterable[str]]],
    demographics: Sequence[Sequence[Sequence[float]]] | None = None,
) -> Corpus:
    """Build a corpus from in-memory token sequences (same rules as loading)."""
    token_patients = [[list(v) for v in p] for p in patients]
    return _build_corpus(token_patients, demographics)


def save_corpus(
    corpus: Corpus,
    visits_path: str | Path,
    demo_path: str | Path | None = None,
) -> None:
    """Write a corpus in the on-disk layout accepted by :func:`load_corpus`.

    Tokens are emitted in index order, so re-loading reproduces the corpus
    exactly, vocabulary order included.
    """
    visits_path = Path(visits_path)
    with open(visits_path, "w", encoding="utf-8") as handle:
        for p, patient in enumerate(corpus.patients):
            if p:
                handle.write("\n")
            for visit in patient.visits:
                handle.write(" ".join(corpus.vocabulary.token(c) for c in visit.codes) + "\n")
    if demo_path is not None:
        if corpus.demo_dim == 0:
            raise ValueError("corpus has no demographics to write")
        with open(Path(demo_path), "w", encoding="utf-8") as handle:
            for p, patient in enumerate(corpus.patients):
                if p:
                    handle.write("\n")
                for visit in patient.visits:
                    handle.write(",".join(repr(x) for x in visit.demographics) + "\n")


def load_labels(path: str | Path, corpus: Corpus) -> np.ndarray:
    """Load per-visit binary labels laid out like the visit file.

    Patients with fewer than two label rows are dropped, mirroring the visit
    loader, and the remaining structure must match ``corpus`` exactly.
    Returns an int8 array over visits in corpus order.
    """
    path = Path(path)
    label_patients = [p for p in _parse_block_file(path, _parse_label_line(path)) if len(p) >= 2]
    shape = [len(p) for p in corpus.patients]
    label_shape = [len(p) for p in label_patients]
    if shape != label_shape:
        raise CorpusFormatError(
            f"label row count mismatch: corpus has {shape} visits per patient, "
            f"labels have {label_shape}"
        )
    return np.array([lab for p in label_patients for lab in p], dtype=np.int8)


def save_labels(labels: Sequence[int], corpus: Corpus, path: str | Path) -> None:
    """Write per-visit labels with blank lines mirroring patient boundaries."""
    labels = np.asarray(labels)
    if labels.shape != (corpus.total_visits,):
        raise ValueError(f"expected {corpus.total_visits} labels, got {labels.shape}")
    with open(Path(path), "w", encoding="utf-8") as handle:
        pos = 0
        for p, patient in enumerate(corpus.patients):
            if p:
                handle.write("\n")
            for _ in patient.visits:
                handle.write(f"{int(labels[pos])}\n")
                pos += 1


def load_grouper(path: str | Path, vocabulary: Vocabulary) -> GrouperMap:
    """Load a code-to-group map from a two-column tab-separated file.

    Group indices are assigned in first-appearance order of group tokens.
    Rows for tokens outside ``vocabulary`` are ignored; every vocabulary
    token must be covered.
    """
    path = Path(path)
    group_index: dict[str, int] = {}
    group_of: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 'code<TAB>group', got {stripped!r}"
                )
            code_tok, group_tok = parts[0].strip(), parts[1].strip()
            if code_tok not in vocabulary:
                continue
            if group_tok not in group_index:
                group_index[group_tok] = len(group_index)
            group_of[vocabulary.index(code_tok)] = group_index[group_tok]
    missing = [t for t in vocabulary.tokens if vocabulary.index(t) not in group_of]
    if missing:
        raise CorpusFormatError(
            f"{path}: {len(missing)} vocabulary token(s) without a group, e.g. {missing[:3]}"
        )
    return GrouperMap(group_of, len(group_index))


def save_grouper(grouper: GrouperMap, vocabulary: Vocabulary, path: str | Path) -> None:
    """Write a grouper as 'code<TAB>g<index>' rows in vocabulary order."""
    width = len(str(max(grouper.n_groups - 1, 1)))
    with open(Path(path), "w", encoding="utf-8") as handle:
        for c in range(len(vocabulary)):
            if c not in grouper.group_of:
                raise ValueError(f"code {c} has no group")
            handle.write(f"{vocabulary.token(c)}\tg{grouper.group_of[c]:0{width}d}\n")


def _split_patient_ids(n: int, ratio: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if n < 2:
        raise ValueError("need at least 2 patients to split")
    n_first = math.ceil(ratio * n)
    if n_first >= n:
        raise ValueError(f"ratio {ratio} leaves the second part empty for {n} patients")
    perm = np.random.default_rng(seed).permutation(n)
    return sorted(int(i) for i in perm[:n_first]), sorted(int(i) for i in perm[n_first:])


def split_corpus(corpus: Corpus, ratio: float, seed: int) -> tuple[Corpus, Corpus]:
    """Partition patients into two corpora by a seeded shuffle.

    The first part receives ceil(ratio * n_patients) patients; both parts
    share the original vocabulary.  ``ratio`` must lie strictly inside (0, 1)
    and must leave the second part non-empty.
    """
    first_ids, second_ids = _split_patient_ids(corpus.n_patients, ratio, seed)
    first = tuple(corpus.patients[i] for i in first_ids)
    second = tuple(corpus.patients[i] for i in second_ids)
    return Corpus(first, corpus.vocabulary), Corpus(second, corpus.vocabulary)


def split_corpus_with_labels(
    corpus: Corpus, labels: Sequence[int], ratio: float, seed: int
) -> tuple[Corpus, np.ndarray, Corpus, np.ndarray]:
    """Like :func:`split_corpus`, also carrying per-visit labels along."""
    labels = np.asarray(labels)
    if labels.shape != (corpus.total_visits,):
        raise ValueError(f"expected {corpus.total_visits} labels, got {labels.shape}")
    first_ids, second_ids = _split_patient_ids(corpus.n_patients, ratio, seed)
    offsets = np.concatenate(([0], np.cumsum([len(p) for p in corpus.patients])))

    def take(ids):
        patients = tuple(corpus.patients[i] for i in ids)
        rows = np.concatenate([labels[offsets[i] : offsets[i + 1]] for i in ids])
        return Corpus(patients, corpus.vocabulary), rows

    first, first_labels = take(first_ids)
    second, second_labels = take(second_ids)
    return first, first_labels, second, second_labels


def to_multi_hot(visit: Visit, size: int) -> np.ndarray:
    """Binary vector of length ``size`` with ones at the visit's code indices."""
    if visit.codes[-1] >= size:
        raise ValueError(f"code index {visit.codes[-1]} out of range for size {size}")
    out = np.zeros(size, dtype=np.float64)
    out[list(visit.codes)] = 1.0
    return out


def group_targets(visit: Visit, grouper: GrouperMap) -> np.ndarray:
    """Binary vector over groups: 1 where some code of the visit maps there."""
    out = np.zeros(grouper.n_groups, dtype=np.float64)
    for c in visit.codes:
        if c not in grouper.group_of:
            raise ValueError(f"code {c} has no group")
        out[grouper.group_of[c]] = 1.0
    return out


def encode_demographics(
    age: float,
    sex: int,
    ethnicity: int,
    *,
    max_age: float = 90.0,
    n_sexes: int = 2,
    n_ethnicities: int = 3,
) -> tuple[float, ...]:
    """Encode (age, sex, ethnicity) as [scaled age, sex one-hot, ethnicity one-hot]."""
    if not 0 <= sex < n_sexes:
        raise ValueError(f"sex must be in [0, {n_sexes})")
    if not 0 <= ethnicity < n_ethnicities:
        raise ValueError(f"ethnicity must be in [0, {n_ethnicities})")
    scaled = min(max(float(age), 0.0), max_age) / max_age
    sex_hot = tuple(1.0 if i == sex else 0.0 for i in range(n_sexes))
    eth_hot = tuple(1.0 if i == ethnicity else 0.0 for i in range(n_ethnicities))
    return (scaled,) + sex_hot + eth_hot


def generate_synthetic(config: SynthConfig) -> tuple[Corpus, GrouperMap, np.ndarray]:
    """Generate a corpus from a latent-group process, deterministic in the seed.

    Each group owns a contiguous block of the code pool.  A patient walks a
    sticky Markov chain over groups; each visit draws a shifted-Poisson
    number of distinct codes (mean ``mean_codes_per_visit``, minimum 1),
    mostly from the active group's block.  The visit's binary severity label
    is 1 iff its active group lies in the first ceil(n_groups / 4) groups.

    Returns
    -------
    (corpus, grouper, labels)
        ``labels`` is an int8 array over visits in corpus order.  The
        vocabulary contains only codes that actually occur, in
        first-appearance order, so saving and re-loading is exact.
    """
    rng = np.random.default_rng(config.seed)
    n_codes, n_groups = config.n_codes, config.n_groups
    owner = (np.arange(n_codes) * n_groups) // n_codes  # contiguous blocks
    stay = config.transition_sharpness / (config.transition_sharpness + 1.0)
    affinity = config.within_group_affinity / (config.within_group_affinity + 1.0)
    n_severe = math.ceil(n_groups / 4)

    # per-group sampling distribution over the full pool
    uniform = np.full(n_codes, (1.0 - affinity) / n_codes)
    group_dist = np.tile(uniform, (n_groups, 1))
    for g in range(n_groups):
        block = np.flatnonzero(owner == g)
        group_dist[g, block] += affinity / block.size

    visits_lam = max(config.mean_visits_per_patient - 2.0, 0.0)
    codes_lam = config.mean_codes_per_visit - 1.0

    raw_patients: list[list[np.ndarray]] = []
    raw_demo: list[list[tuple[float, ...]]] = []
    raw_labels: list[list[int]] = []
    for _ in range(config.n_patients):
        n_visits = 2 + int(rng.poisson(visits_lam))
        group = int(rng.integers(n_groups))
        age = float(rng.uniform(1.0, 80.0))
        sex = int(rng.integers(2))
        ethnicity = int(rng.integers(3))
        visits, demo, labels = [], [], []
        for t in range(n_visits):
            if t > 0 and rng.random() >= stay:
                group = int(rng.integers(n_groups))
            n_draw = min(1 + int(rng.poisson(codes_lam)), n_codes)
            codes = rng.choice(n_codes, size=n_draw, replace=False, p=group_dist[group])
            visits.append(codes)
            demo.append(encode_demographics(age + 0.25 * t, sex, ethnicity))
            labels.append(1 if group < n_severe else 0)
        raw_patients.append(visits)
        raw_demo.append(demo)
        raw_labels.append(labels)

    # keep only codes that occur, indexed in first-appearance order
    width = len(str(n_codes - 1))
    dense_of: dict[int, int] = {}
    tokens: list[str] = []
    patients: list[PatientRecord] = []
    for visits, demo in zip(raw_patients, raw_demo):
        built = []
        for codes, dvec in zip(visits, demo):
            idx = []
            for pool_id in codes:
                pool_id = int(pool_id)
                if pool_id not in dense_of:
                    dense_of[pool_id] = len(tokens)
                    tokens.append(f"c{pool_id:0{width}d}")
                idx.append(dense_of[pool_id])
            built.append(Visit(tuple(idx), dvec))
        patients.append(PatientRecord(tuple(built)))

    corpus = Corpus(tuple(patients), Vocabulary(tuple(tokens)))
    grouper = GrouperMap(
        {dense: int(owner[pool]) for pool, dense in dense_of.items()}, n_groups
    )
    labels = np.array([lab for p in raw_labels for lab in p], dtype=np.int8)
    return corpus, grouper, labels
