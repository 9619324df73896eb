"""Synthetic certificate world: generator plus a deterministic rule coder.

The world is a layered acyclic causal graph over a code vocabulary spread
across all 22 chapters: underlying nodes feed two intermediate layers and a
terminal layer. A certificate is sampled by drawing demographics, a latent
underlying cause, and a weighted walk to a terminal; the walk is written in
reverse causal order across Part I lines (terminal on line 1, underlying
alone on the lowest used line), with optional Part II comorbidities.

An ordered list of modification rules (trigger code sets over Part I /
Part II, optionally scoped to a year range) can replace the underlying
cause; the stored label is the latent cause after rules, evaluated on the
clean certificate. Reporting noise (interior line omission, in-line rank
shuffling, spurious code insertion) then degrades the observable chain
without changing the label.

The rule coder mirrors the clean-world semantics: the tentative cause is
the first code of the lowest non-empty Part I line, then modification
rules apply (first match wins). It rejects instead of answering when the
origin line holds several codes ("ambiguous-origin"), when a chain code
has no graph edge into the line above it ("unlinked-code"), or when
matched rules disagree ("conflicting-rules"). On a zero-noise world every
sampled certificate is therefore coded exactly to its label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .certificate import (
    CausalChain,
    Certificate,
    Demographics,
    AGE_CLASSES,
    NUM_LINES,
    PART_ONE_LINES,
    REJECT_MARKER,
)
from .icd10 import Code, Vocabulary, build_vocabulary, chapter_of, parse_code

WORLD_FORMAT = "ucdcoder-world-v1"

# Codes guaranteed to exist in every world: the comorbidity-rule pair and a
# few narcotics-flavored codes that make trajectory studies meaningful.
ANCHOR_UNDERLYING = ("C46", "F110", "F119", "X42")
ANCHOR_COMORBIDITY = ("B20",)


class WorldError(ValueError):
    """Raised for invalid world specifications or exhausted resampling."""


@dataclass(frozen=True)
class ModificationRule:
    ident: str
    part1_trigger: tuple[Code, ...]
    part2_trigger: tuple[Code, ...]
    year_range: tuple[int, int] | None
    replacement: Code

    def matches(self, part1: frozenset[Code], part2: frozenset[Code], year: int) -> bool:
        if self.year_range is not None and not (
            self.year_range[0] <= year <= self.year_range[1]
        ):
            return False
        return set(self.part1_trigger) <= part1 and set(self.part2_trigger) <= part2


@dataclass(frozen=True)
class DemographicEffect:
    """Weight multipliers active when the criteria all match."""

    age_range: tuple[int, int] | None = None
    gender: int | None = None
    year_range: tuple[int, int] | None = None
    prior_multipliers: tuple[tuple[Code, float], ...] = ()
    edge_multipliers: tuple[tuple[Code, Code, float], ...] = ()

    def applies(self, demo: Demographics) -> bool:
        if self.age_range is not None and not (
            self.age_range[0] <= demo.age_class <= self.age_range[1]
        ):
            return False
        if self.gender is not None and demo.gender != self.gender:
            return False
        if self.year_range is not None and not (
            self.year_range[0] <= demo.year <= self.year_range[1]
        ):
            return False
        return True


@dataclass(frozen=True)
class NoiseRates:
    line_omission: float = 0.0
    rank_shuffle: float = 0.0
    spurious_code: float = 0.0

    def __post_init__(self) -> None:
        for name, value in (
            ("line_omission", self.line_omission),
            ("rank_shuffle", self.rank_shuffle),
            ("spurious_code", self.spurious_code),
        ):
            if not 0.0 <= value < 1.0:
                raise WorldError(f"noise rate {name} must lie in [0, 1), got {value}")


DEFAULT_NOISE = NoiseRates(line_omission=0.12, rank_shuffle=0.10, spurious_code=0.30)


@dataclass(frozen=True)
class RuleOutcome:
    code: Code | None
    trace: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.trace:
            raise WorldError("rule outcome must carry a trace")

    @property
    def rejected(self) -> bool:
        return self.code is None

    def as_field(self) -> str:
        return REJECT_MARKER if self.code is None else self.code.text


@dataclass(frozen=True)
class WorldSpec:
    seed: int
    years: tuple[int, int]
    vocabulary: Vocabulary
    underlying: tuple[Code, ...]
    mid1: tuple[Code, ...]
    mid2: tuple[Code, ...]
    terminals: tuple[Code, ...]
    comorbidities: tuple[Code, ...]
    underlying_weights: tuple[float, ...]
    comorbidity_weights: tuple[float, ...]
    comorbidity_count_probs: tuple[float, ...]
    edges: tuple[tuple[Code, Code, float], ...]
    rules: tuple[ModificationRule, ...]
    effects: tuple[DemographicEffect, ...]
    noise: NoiseRates
    gender_weights: tuple[float, float]
    age_weights: tuple[float, ...]

    # Derived lookup tables (not serialized).
    _successors: dict = field(default_factory=dict, compare=False, repr=False)
    _predecessors: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        self.validate()
        succ: dict[Code, list[tuple[Code, float]]] = {}
        pred: dict[Code, list[Code]] = {}
        for src, dst, w in self.edges:
            succ.setdefault(src, []).append((dst, w))
            pred.setdefault(dst, []).append(src)
        object.__setattr__(self, "_successors", succ)
        object.__setattr__(self, "_predecessors", pred)

    def validate(self) -> None:
        vocab = self.vocabulary
        roles = (self.underlying, self.mid1, self.mid2, self.terminals, self.comorbidities)
        for group in roles:
            for code in group:
                if code not in vocab:
                    raise WorldError(f"role code {code.text} missing from the vocabulary")
        if len(self.underlying_weights) != len(self.underlying):
            raise WorldError("underlying weight count mismatch")
        if len(self.comorbidity_weights) != len(self.comorbidities):
            raise WorldError("comorbidity weight count mismatch")
        if len(self.age_weights) != AGE_CLASSES:
            raise WorldError(f"age weights must have {AGE_CLASSES} entries")
        if abs(sum(self.comorbidity_count_probs) - 1.0) > 1e-9:
            raise WorldError("comorbidity count probabilities must sum to 1")
        for rule in self.rules:
            for code in (*rule.part1_trigger, *rule.part2_trigger, rule.replacement):
                if code not in vocab:
                    raise WorldError(
                        f"rule {rule.ident} references {code.text}, absent from vocabulary"
                    )
        for src, dst, w in self.edges:
            if src not in vocab or dst not in vocab:
                raise WorldError(f"edge {src.text}->{dst.text} references unknown codes")
            if w <= 0:
                raise WorldError(f"edge {src.text}->{dst.text} has nonpositive weight")
        self._check_acyclic()
        self._check_reachability()

    def _check_acyclic(self) -> None:
        succ: dict[Code, list[Code]] = {}
        indeg: dict[Code, int] = {}
        nodes = set()
        for src, dst, _ in self.edges:
            succ.setdefault(src, []).append(dst)
            indeg[dst] = indeg.get(dst, 0) + 1
            nodes.update((src, dst))
        frontier = [n for n in nodes if indeg.get(n, 0) == 0]
        seen = 0
        while frontier:
            node = frontier.pop()
            seen += 1
            for nxt in succ.get(node, ()):
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    frontier.append(nxt)
        if seen != len(nodes):
            raise WorldError("causal graph contains a cycle")

    def _check_reachability(self) -> None:
        terminals = set(self.terminals)
        succ: dict[Code, list[Code]] = {}
        for src, dst, _ in self.edges:
            succ.setdefault(src, []).append(dst)
        for u in self.underlying:
            stack = [u]
            visited = set()
            reached = False
            while stack and not reached:
                node = stack.pop()
                if node in terminals:
                    reached = True
                    break
                if node in visited:
                    continue
                visited.add(node)
                stack.extend(succ.get(node, ()))
            if not reached:
                raise WorldError(f"underlying node {u.text} reaches no terminal")

    def successors(self, code: Code) -> list[tuple[Code, float]]:
        return self._successors.get(code, [])

    def predecessors(self, code: Code) -> list[Code]:
        return self._predecessors.get(code, [])

    def has_edge(self, src: Code, dst: Code) -> bool:
        return any(d == dst for d, _ in self._successors.get(src, ()))


def _codes_by_chapter() -> dict[int, list[str]]:
    buckets: dict[int, list[str]] = {}
    for letter_index in range(26):
        letter = chr(ord("A") + letter_index)
        for num in range(100):
            text = f"{letter}{num:02d}"
            try:
                chapter = chapter_of(parse_code(text))
            except Exception:
                continue
            buckets.setdefault(chapter.index, []).append(text)
    return buckets


def build_world(
    seed: int,
    vocab_size: int = 200,
    noise: NoiseRates | None = None,
    years: tuple[int, int] = (2000, 2015),
) -> WorldSpec:
    """Construct a deterministic world from a seed and size knobs.

    Always includes a Part-II-triggered comorbidity rule (the Kaposi/HIV
    analog C46 + B20 -> B20) and a year-scoped drift rule rewriting one
    common intermediate's chains from 2008 onward.
    """
    if vocab_size < 60:
        raise WorldError(f"vocab_size must be at least 60, got {vocab_size}")
    if years[0] > years[1]:
        raise WorldError(f"invalid year range {years}")
    rng = np.random.default_rng([seed, 11])

    buckets = _codes_by_chapter()
    anchors = [*ANCHOR_UNDERLYING, *ANCHOR_COMORBIDITY]
    chosen: list[str] = list(anchors)
    per_chapter = max(1, (vocab_size - len(chosen)) // len(buckets))
    for index in sorted(buckets):
        pool = [c for c in buckets[index] if c not in chosen]
        take = min(per_chapter, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False)
        for p in sorted(picks):
            base = pool[p]
            # Half the codes get a fourth digit for syntactic variety.
            chosen.append(base + str(rng.integers(10)) if rng.random() < 0.5 else base)
    flat = [c for index in sorted(buckets) for c in buckets[index]]
    i = 0
    while len(set(chosen)) < vocab_size and i < len(flat):
        if flat[i] not in chosen:
            chosen.append(flat[i])
        i += 1
    vocab = build_vocabulary(list(dict.fromkeys(chosen))[:vocab_size])

    anchors_set = {parse_code(c) for c in anchors}
    rest = [c for c in vocab.codes if c not in anchors_set]
    order = rng.permutation(len(rest))
    rest = [rest[i] for i in order]
    n = len(rest)
    n_u, n_m1, n_m2, n_t = (
        max(4, int(0.30 * n)),
        max(3, int(0.18 * n)),
        max(3, int(0.18 * n)),
        max(3, int(0.22 * n)),
    )
    underlying = tuple(sorted([*map(parse_code, ANCHOR_UNDERLYING), *rest[:n_u]]))
    mid1 = tuple(sorted(rest[n_u : n_u + n_m1]))
    mid2 = tuple(sorted(rest[n_u + n_m1 : n_u + n_m1 + n_m2]))
    terminals = tuple(sorted(rest[n_u + n_m1 + n_m2 : n_u + n_m1 + n_m2 + n_t]))
    comorbidities = tuple(
        sorted([*map(parse_code, ANCHOR_COMORBIDITY), *rest[n_u + n_m1 + n_m2 + n_t :]])
    )

    def pick(pool: Sequence[Code], count: int) -> list[Code]:
        count = min(count, len(pool))
        idx = rng.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in sorted(idx)]

    edges: list[tuple[Code, Code, float]] = []
    for u in underlying:
        targets = pick(mid1, int(rng.integers(1, 3)))
        if rng.random() < 0.55:
            targets += pick(mid2, 1)
        if rng.random() < 0.25:
            targets += pick(terminals, 1)
        for t in targets:
            edges.append((u, t, float(rng.uniform(0.5, 2.0))))
    for m in mid1:
        targets = pick(mid2, int(rng.integers(1, 3)))
        if rng.random() < 0.45:
            targets += pick(terminals, 1)
        for t in targets:
            edges.append((m, t, float(rng.uniform(0.5, 2.0))))
    for m in mid2:
        for t in pick(terminals, int(rng.integers(1, 3))):
            edges.append((m, t, float(rng.uniform(0.5, 2.0))))
    edges.sort(key=lambda e: (e[0].text, e[1].text))

    # Year-drift rule: reroute the busiest first-layer intermediate.
    indeg: dict[Code, int] = {}
    for src, dst, _ in edges:
        if dst in set(mid1):
            indeg[dst] = indeg.get(dst, 0) + 1
    drift_trigger = max(sorted(indeg), key=lambda c: indeg[c])
    drift_target = comorbidities[-1] if comorbidities[-1].text != "B20" else comorbidities[0]
    drift_from = years[0] + (years[1] - years[0]) // 2
    rules = (
        ModificationRule(
            ident="rule:comorbidity-underlying",
            part1_trigger=(parse_code("C46"),),
            part2_trigger=(parse_code("B20"),),
            year_range=None,
            replacement=parse_code("B20"),
        ),
        ModificationRule(
            ident=f"rule:year-drift-{drift_from}",
            part1_trigger=(drift_trigger,),
            part2_trigger=(),
            year_range=(drift_from, years[1]),
            replacement=drift_target,
        ),
    )

    old_age_boost = tuple((u, 3.0) for u in pick(underlying, max(2, len(underlying) // 5)))
    male_boost = tuple((u, 2.0) for u in pick(underlying, max(2, len(underlying) // 6)))
    early_edges = tuple(
        (src, dst, 2.0)
        for src, dst, _ in (edges[i] for i in pick_indices(rng, len(edges), max(3, len(edges) // 10)))
    )
    effects = (
        DemographicEffect(age_range=(13, 24), prior_multipliers=old_age_boost),
        DemographicEffect(gender=1, prior_multipliers=male_boost),
        DemographicEffect(year_range=(years[0], drift_from - 1), edge_multipliers=early_edges),
    )

    age_weights = tuple(0.3 + (i / (AGE_CLASSES - 1)) ** 2 * 2.7 for i in range(AGE_CLASSES))
    return WorldSpec(
        seed=seed,
        years=years,
        vocabulary=vocab,
        underlying=underlying,
        mid1=mid1,
        mid2=mid2,
        terminals=terminals,
        comorbidities=comorbidities,
        underlying_weights=tuple(float(rng.uniform(0.5, 2.0)) for _ in underlying),
        comorbidity_weights=tuple(float(rng.uniform(0.5, 2.0)) for _ in comorbidities),
        comorbidity_count_probs=(0.5, 0.3, 0.2),
        edges=tuple(edges),
        rules=rules,
        effects=effects,
        noise=noise if noise is not None else DEFAULT_NOISE,
        gender_weights=(0.52, 0.48),
        age_weights=age_weights,
    )


def pick_indices(rng: np.random.Generator, n: int, count: int) -> list[int]:
    count = min(count, n)
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def _weighted_choice(rng: np.random.Generator, items: Sequence, weights) -> object:
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise WorldError("weighted choice over nonpositive weights")
    return items[int(rng.choice(len(items), p=weights / total))]


def _match_rules(
    world: WorldSpec, part1: frozenset[Code], part2: frozenset[Code], year: int
) -> list[ModificationRule]:
    return [r for r in world.rules if r.matches(part1, part2, year)]


def _apply_rules(
    world: WorldSpec, latent: Code, part1: frozenset[Code], part2: frozenset[Code], year: int
) -> tuple[Code, str | None] | None:
    """Resolve the labeled cause; None signals a conflicting-rules draw."""
    matches = _match_rules(world, part1, part2, year)
    if not matches:
        return latent, None
    replacements = {r.replacement for r in matches}
    if len(replacements) > 1:
        return None
    return matches[0].replacement, matches[0].ident


def sample_certificate(
    world: WorldSpec, rng: np.random.Generator, ident: str = "sample"
) -> Certificate:
    """Draw one certificate; the label is the latent cause after rules.

    Degenerate draws (conflicting rule triggers on the clean chain) are
    resampled a bounded number of times, keeping labels consistent with
    the rule coder's clean-world behavior.
    """
    for _ in range(64):
        demo = _sample_demographics(world, rng)
        effects = [e for e in world.effects if e.applies(demo)]

        priors = np.asarray(world.underlying_weights, dtype=np.float64).copy()
        for e in effects:
            for code, factor in e.prior_multipliers:
                priors[world.underlying.index(code)] *= factor
        latent = _weighted_choice(rng, world.underlying, priors)

        path = [latent]
        terminals = set(world.terminals)
        while path[-1] not in terminals:
            options = world.successors(path[-1])
            if not options:
                raise WorldError(f"node {path[-1].text} has no successors")
            weights = []
            for dst, w in options:
                for e in effects:
                    for src2, dst2, factor in e.edge_multipliers:
                        if src2 == path[-1] and dst2 == dst:
                            w = w * factor
                weights.append(w)
            path.append(_weighted_choice(rng, [dst for dst, _ in options], weights))
            if len(path) > PART_ONE_LINES:
                raise WorldError("causal walk exceeded the Part I line count")

        part1_lines = [[c] for c in reversed(path)]
        part2_lines: list[list[Code]] = [[], []]
        count = int(rng.choice(len(world.comorbidity_count_probs),
                               p=np.asarray(world.comorbidity_count_probs)))
        pool = list(world.comorbidities)
        pool_w = list(world.comorbidity_weights)
        present = set(path)
        for k in range(count):
            if not pool:
                break
            cm = _weighted_choice(rng, pool, pool_w)
            i = pool.index(cm)
            pool.pop(i)
            pool_w.pop(i)
            if cm in present:
                continue
            part2_lines[min(k, 1)].append(cm)
            present.add(cm)

        resolved = _apply_rules(
            world,
            latent,
            frozenset(c for line in part1_lines for c in line),
            frozenset(c for line in part2_lines for c in line),
            demo.year,
        )
        if resolved is None:
            continue  # conflicting triggers: degenerate draw, resample
        label = resolved[0]

        part1_lines = _apply_noise(world, rng, part1_lines, part2_lines)
        lines = part1_lines + [[]] * (PART_ONE_LINES - len(part1_lines)) + part2_lines
        chain = CausalChain(tuple(tuple(line) for line in lines))
        return Certificate(ident, chain, demo, label=label)
    raise WorldError("resampling budget exhausted; rules conflict on most draws")


def _sample_demographics(world: WorldSpec, rng: np.random.Generator) -> Demographics:
    gender = 1 + int(rng.choice(2, p=np.asarray(world.gender_weights) /
                                sum(world.gender_weights)))
    age_w = np.asarray(world.age_weights)
    age = int(rng.choice(AGE_CLASSES, p=age_w / age_w.sum()))
    year = int(rng.integers(world.years[0], world.years[1] + 1))
    return Demographics(gender=gender, age_class=age, year=year)


def _apply_noise(
    world: WorldSpec,
    rng: np.random.Generator,
    part1_lines: list[list[Code]],
    part2_lines: list[list[Code]],
) -> list[list[Code]]:
    """Label-preserving reporting noise, applied omission -> spurious -> shuffle."""
    noise = world.noise

    if rng.random() < noise.line_omission and len(part1_lines) >= 3:
        k = int(rng.integers(1, len(part1_lines) - 1))
        part1_lines = part1_lines[:k] + part1_lines[k + 1 :]

    if rng.random() < noise.spurious_code:
        targets = ["inline", "part2"]
        if len(part1_lines) < PART_ONE_LINES:
            targets.append("deeper")
        target = targets[int(rng.integers(len(targets)))]
        present = {c for line in part1_lines for c in line}
        present |= {c for line in part2_lines for c in line}
        plausible = rng.random() < 0.5
        if target == "deeper":
            anchor = part1_lines[-1][0]
            code = _draw_spurious(world, rng, world.predecessors(anchor) if plausible else (),
                                  present)
            if code is not None:
                part1_lines = part1_lines + [[code]]
        elif target == "inline":
            li = int(rng.integers(len(part1_lines)))
            causes: Sequence[Code] = ()
            if plausible and li > 0:
                causes = sorted(
                    {p for c in part1_lines[li - 1] for p in world.predecessors(c)},
                    key=lambda c: c.text,
                )
            code = _draw_spurious(world, rng, causes, present)
            if code is not None:
                pos = int(rng.integers(len(part1_lines[li]) + 1))
                part1_lines[li] = part1_lines[li][:pos] + [code] + part1_lines[li][pos:]
        else:
            pool = world.comorbidities if plausible else ()
            code = _draw_spurious(world, rng, pool, present)
            if code is not None:
                part2_lines[0 if not part2_lines[0] else 1].append(code)

    if rng.random() < noise.rank_shuffle:
        lines = part1_lines + part2_lines
        crowded = [i for i, line in enumerate(lines) if len(line) >= 2]
        if crowded:
            i = crowded[int(rng.integers(len(crowded)))]
            perm = rng.permutation(len(lines[i]))
            lines[i][:] = [lines[i][p] for p in perm]

    return part1_lines


def _draw_spurious(
    world: WorldSpec,
    rng: np.random.Generator,
    preferred: Sequence[Code],
    present: set[Code],
) -> Code | None:
    candidates = [c for c in preferred if c not in present]
    if candidates:
        return candidates[int(rng.integers(len(candidates)))]
    codes = world.vocabulary.codes
    for _ in range(16):
        code = codes[int(rng.integers(len(codes)))]
        if code not in present:
            return code
    return None


def rule_code(cert: Certificate, world: WorldSpec) -> RuleOutcome:
    """Deterministically code a certificate, or reject it as too complex."""
    for code in cert.chain.all_codes():
        if code not in world.vocabulary:
            raise WorldError(f"certificate {cert.id}: code {code.text} not in vocabulary")

    part1 = [
        (r, list(line)) for r, line in enumerate(cert.chain.part_one, start=1) if line
    ]
    lowest_line, lowest = part1[-1]
    if len(lowest) > 1:
        return RuleOutcome(None, ("ambiguous-origin",))

    for (above_no, above), (below_no, below) in zip(part1, part1[1:]):
        above_set = set(above)
        for code in below:
            if not any(world.has_edge(code, a) for a in above_set):
                return RuleOutcome(None, (f"unlinked-code:{code.text}@line{below_no}",))

    part1_set = frozenset(c for _, line in part1 for c in line)
    part2_set = frozenset(c for line in cert.chain.part_two for c in line)
    matches = _match_rules(world, part1_set, part2_set, cert.demo.year)
    if matches:
        replacements = {r.replacement for r in matches}
        if len(replacements) > 1:
            idents = ",".join(r.ident for r in matches)
            return RuleOutcome(None, (f"conflicting-rules:{idents}",))
        return RuleOutcome(matches[0].replacement, (matches[0].ident,))
    return RuleOutcome(lowest[0], ("origin-line",))


@dataclass
class GeneratedData:
    train: list[Certificate]
    validation: list[Certificate]
    test: list[Certificate]
    summary: dict

    def splits(self) -> dict[str, list[Certificate]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def _largest_remainder(quota: int, counts: list[int]) -> list[int]:
    total = sum(counts)
    raw = [quota * c / total for c in counts]
    base = [int(x) for x in raw]
    short = quota - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def generate_dataset(
    world: WorldSpec,
    n: int,
    val_size: int,
    test_size: int,
    seed: int = 0,
) -> GeneratedData:
    """Sample n records, rule-code them, and split per-year stratified.

    Each record is a pure function of (seed, index). The summary reports
    the rule coder's overall accuracy (rejects scored as errors), its
    accuracy on non-rejected records, and the reject rate, overall and per
    split.
    """
    if val_size < 0 or test_size < 0 or val_size + test_size > n:
        raise WorldError(
            f"split sizes val={val_size} test={test_size} exceed the dataset size {n}"
        )
    records: list[Certificate] = []
    for i in range(n):
        rng = np.random.default_rng([seed, 1001, i])
        cert = sample_certificate(world, rng, ident=f"r{i:06d}")
        outcome = rule_code(cert, world)
        records.append(
            Certificate(cert.id, cert.chain, cert.demo, cert.label, outcome.as_field())
        )

    by_year: dict[int, list[int]] = {}
    for i, cert in enumerate(records):
        by_year.setdefault(cert.demo.year, []).append(i)
    years = sorted(by_year)
    counts = [len(by_year[y]) for y in years]
    val_quota = _largest_remainder(val_size, counts)
    remaining = [c - q for c, q in zip(counts, val_quota)]
    test_quota = _largest_remainder(test_size, remaining)

    val_idx: list[int] = []
    test_idx: list[int] = []
    train_idx: list[int] = []
    for y, qv, qt in zip(years, val_quota, test_quota):
        idx = by_year[y]
        val_idx.extend(idx[:qv])
        test_idx.extend(idx[qv : qv + qt])
        train_idx.extend(idx[qv + qt :])

    splits = {
        "train": [records[i] for i in sorted(train_idx)],
        "validation": [records[i] for i in sorted(val_idx)],
        "test": [records[i] for i in sorted(test_idx)],
    }
    summary = {"n": n, "splits": {}}
    for name, certs in [("all", records), *splits.items()]:
        stats = baseline_stats(certs)
        if name == "all":
            summary.update(stats)
        summary["splits"][name] = {"n": len(certs), **stats}
    return GeneratedData(splits["train"], splits["validation"], splits["test"], summary)


def baseline_stats(certs: Sequence[Certificate]) -> dict:
    """Rule-coder accuracy metrics from stored rule_output and label fields."""
    n = len(certs)
    if n == 0:
        return {
            "rule_overall_accuracy": None,
            "rule_non_reject_accuracy": None,
            "reject_rate": None,
        }
    rejects = sum(1 for c in certs if c.rule_output == REJECT_MARKER)
    coded = [c for c in certs if c.rule_output != REJECT_MARKER]
    correct = sum(1 for c in coded if c.label is not None and c.rule_output == c.label.text)
    return {
        "rule_overall_accuracy": correct / n,
        "rule_non_reject_accuracy": correct / len(coded) if coded else None,
        "reject_rate": rejects / n,
    }


# World serialization: one UTF-8 JSON document, keys sorted, so identical
# worlds serialize byte-identically.

def world_to_json(world: WorldSpec) -> str:
    doc = {
        "format": WORLD_FORMAT,
        "seed": world.seed,
        "years": list(world.years),
        "vocabulary": [c.text for c in world.vocabulary.codes],
        "underlying": [c.text for c in world.underlying],
        "mid1": [c.text for c in world.mid1],
        "mid2": [c.text for c in world.mid2],
        "terminals": [c.text for c in world.terminals],
        "comorbidities": [c.text for c in world.comorbidities],
        "underlying_weights": list(world.underlying_weights),
        "comorbidity_weights": list(world.comorbidity_weights),
        "comorbidity_count_probs": list(world.comorbidity_count_probs),
        "edges": [[s.text, d.text, w] for s, d, w in world.edges],
        "rules": [
            {
                "ident": r.ident,
                "part1": [c.text for c in r.part1_trigger],
                "part2": [c.text for c in r.part2_trigger],
                "years": list(r.year_range) if r.year_range else None,
                "replacement": r.replacement.text,
            }
            for r in world.rules
        ],
        "effects": [
            {
                "age": list(e.age_range) if e.age_range else None,
                "gender": e.gender,
                "years": list(e.year_range) if e.year_range else None,
                "prior": {c.text: f for c, f in e.prior_multipliers},
                "edges": {f"{s.text} {d.text}": f for s, d, f in e.edge_multipliers},
            }
            for e in world.effects
        ],
        "noise": {
            "line_omission": world.noise.line_omission,
            "rank_shuffle": world.noise.rank_shuffle,
            "spurious_code": world.noise.spurious_code,
        },
        "gender_weights": list(world.gender_weights),
        "age_weights": list(world.age_weights),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def world_from_json(text: str) -> WorldSpec:
    doc = json.loads(text)
    if doc.get("format") != WORLD_FORMAT:
        raise WorldError(f"unsupported world format {doc.get('format')!r}")
    codes = lambda items: tuple(parse_code(c) for c in items)  # noqa: E731
    rules = tuple(
        ModificationRule(
            ident=r["ident"],
            part1_trigger=codes(r["part1"]),
            part2_trigger=codes(r["part2"]),
            year_range=tuple(r["years"]) if r["years"] else None,
            replacement=parse_code(r["replacement"]),
        )
        for r in doc["rules"]
    )
    effects = tuple(
        DemographicEffect(
            age_range=tuple(e["age"]) if e["age"] else None,
            gender=e["gender"],
            year_range=tuple(e["years"]) if e["years"] else None,
            prior_multipliers=tuple(
                (parse_code(c), f) for c, f in sorted(e["prior"].items())
            ),
            edge_multipliers=tuple(
                (*codes(k.split()), f) for k, f in sorted(e["edges"].items())
            ),
        )
        for e in doc["effects"]
    )
    return WorldSpec(
        seed=doc["seed"],
        years=tuple(doc["years"]),
        vocabulary=build_vocabulary(doc["vocabulary"]),
        underlying=codes(doc["underlying"]),
        mid1=codes(doc["mid1"]),
        mid2=codes(doc["mid2"]),
        terminals=codes(doc["terminals"]),
        comorbidities=codes(doc["comorbidities"]),
        underlying_weights=tuple(doc["underlying_weights"]),
        comorbidity_weights=tuple(doc["comorbidity_weights"]),
        comorbidity_count_probs=tuple(doc["comorbidity_count_probs"]),
        edges=tuple((*codes(e[:2]), e[2]) for e in doc["edges"]),
        rules=rules,
        effects=effects,
        noise=NoiseRates(**doc["noise"]),
        gender_weights=tuple(doc["gender_weights"]),
        age_weights=tuple(doc["age_weights"]),
    )


def save_world(world: WorldSpec, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(world_to_json(world))


def load_world(path) -> WorldSpec:
    with open(path, encoding="utf-8") as fh:
        return world_from_json(fh.read())
