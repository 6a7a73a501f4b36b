"""Synthetic workloads, equivalence campaigns, timing, and the two-stage
pipeline that overlaps plan construction with compute."""

from __future__ import annotations

import csv
import io
import json
import queue
import threading
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import cost
from .errors import VocabTooSmall, WorkerPanic
from .model import FlopLedger, ModelConfig, forward, init_params, loss_and_grads
from .ragged import RaggedBatch, default_positions
from .trie import build_plan, build_plan_auto, should_enable


@dataclass(frozen=True)
class SyntheticSpec:
    """B sequences sharing a P-token prefix with S-token unique suffixes."""

    B: int
    prefix_len: int
    suffix_len: int
    vocab: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.B < 1 or self.prefix_len + self.suffix_len < 1:
            raise ValueError("need B >= 1 and at least one token per sequence")

    @property
    def label(self) -> str:
        return f"B{self.B}_P{self.prefix_len}_S{self.suffix_len}"


class Pattern(Enum):
    SINGLE_SEQUENCE = "single_sequence"
    IDENTICAL_SEQUENCES = "identical_sequences"
    SHARED_PREFIX = "shared_prefix"
    NO_SHARING = "no_sharing"
    MIXED_LENGTHS = "mixed_lengths"
    COMPLEX_SHARING = "complex_sharing"


# total token counts the fixtures must reproduce
PATTERN_TOKENS = {
    Pattern.SINGLE_SEQUENCE: 5,
    Pattern.IDENTICAL_SEQUENCES: 10,
    Pattern.SHARED_PREFIX: 10,
    Pattern.NO_SHARING: 6,
    Pattern.MIXED_LENGTHS: 10,
    Pattern.COMPLEX_SHARING: 20,
}


def make_synthetic_batch(spec: SyntheticSpec) -> RaggedBatch:
    """Seeded shared-prefix batch with guaranteed divergence at position P.

    Suffixes start with B pairwise-distinct tokens, so the compact token
    count is exactly P + B*S and closed-form checks hold without slack.
    """
    b, p, s = spec.B, spec.prefix_len, spec.suffix_len
    if s > 0 and spec.vocab < b:
        raise VocabTooSmall(f"vocab {spec.vocab} < batch size {b}")
    rng = np.random.default_rng(spec.seed)
    prefix = rng.integers(0, spec.vocab, size=p, dtype=np.uint32)
    rows = np.empty((b, p + s), dtype=np.uint32)
    rows[:, :p] = prefix
    if s > 0:
        rows[:, p:] = rng.integers(0, spec.vocab, size=(b, s), dtype=np.uint32)
        # force divergence at the first suffix token
        rows[:, p] = rng.permutation(spec.vocab)[:b]
    tokens = rows.reshape(-1)
    cu = np.arange(b + 1, dtype=np.int64) * (p + s)
    return RaggedBatch(tokens, default_positions(cu), cu)


def make_pattern_batch(pattern: Pattern, seed: int = 0, vocab: int = 97) -> RaggedBatch:
    """Deterministic fixture batches for the six sharing patterns.

    Token values come from the seed; the sharing structure (which positions
    coincide, where branches occur) is pinned per pattern.
    """
    rng = np.random.default_rng((seed, list(Pattern).index(pattern)))

    def distinct(k):
        return rng.permutation(vocab)[:k].astype(np.uint32)

    def draw(k):
        return rng.integers(0, vocab, size=k, dtype=np.uint32)

    if pattern is Pattern.SINGLE_SEQUENCE:
        seqs = [draw(5)]
    elif pattern is Pattern.IDENTICAL_SEQUENCES:
        s = draw(5)
        seqs = [s, s.copy()]
    elif pattern is Pattern.SHARED_PREFIX:
        shared = draw(3)
        tails = distinct(2)
        seqs = [
            np.concatenate([shared, [tails[0]], draw(1)]),
            np.concatenate([shared, [tails[1]], draw(1)]),
        ]
    elif pattern is Pattern.NO_SHARING:
        heads = distinct(2)
        seqs = [
            np.concatenate([[heads[0]], draw(2)]),
            np.concatenate([[heads[1]], draw(2)]),
        ]
    elif pattern is Pattern.MIXED_LENGTHS:
        a = draw(1)
        forks = distinct(2)  # depth-1 branch
        deeper = distinct(2)  # depth-2 branch
        seqs = [
            np.concatenate([a, [forks[0]]]),
            np.concatenate([a, [forks[1]], [deeper[0]]]),
            np.concatenate([a, [forks[1]], [deeper[1]], draw(2)]),
        ]
    elif pattern is Pattern.COMPLEX_SHARING:
        a = draw(1)
        d1 = distinct(2)
        d2 = distinct(2)
        d3 = distinct(2)
        # branches at depths 1, 2, and 3 across four length-5 sequences
        seqs = [
            np.concatenate([a, [d1[0]], draw(3)]),
            np.concatenate([a, [d1[1]], [d2[0]], draw(2)]),
            np.concatenate([a, [d1[1]], [d2[1]], [d3[0]], draw(1)]),
            np.concatenate([a, [d1[1]], [d2[1]], [d3[1]], draw(1)]),
        ]
    else:  # pragma: no cover
        raise ValueError(pattern)

    tokens = np.concatenate(seqs).astype(np.uint32)
    cu = np.cumsum([0] + [len(s) for s in seqs]).astype(np.int64)
    assert tokens.shape[0] == PATTERN_TOKENS[pattern]
    return RaggedBatch(tokens, default_positions(cu), cu)


@dataclass
class VerifyResult:
    pattern: str
    n_tokens: int
    gamma: float
    bypassed: bool
    max_dlogit: float
    mean_dlogit: float
    max_dgrad_rel: float
    mean_dgrad_rel: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def run_verify(
    config: ModelConfig,
    params: dict,
    patterns=None,
    seed: int = 0,
    plan_override: dict | None = None,
) -> list[VerifyResult]:
    """Forward/backward difference table: compact pass vs plain pass.

    Patterns with gamma = 1 bypass the compact path entirely (nothing to
    deduplicate), reported with bypassed=True and zero differences.
    ``plan_override`` maps pattern name -> CompactionPlan, used by negative
    controls with deliberately corrupted indices.
    """
    patterns = list(patterns) if patterns is not None else list(Pattern)
    results = []
    for pattern in patterns:
        batch = make_pattern_batch(pattern, seed=seed)
        rng = np.random.default_rng((seed, 1234))
        targets = rng.integers(0, config.vocab_size, size=batch.num_tokens)
        plan = None
        if plan_override and pattern.value in plan_override:
            plan = plan_override[pattern.value]
        else:
            plan = build_plan_auto(batch)
        bypassed = plan.n_compact == plan.n_original and not (
            plan_override and pattern.value in plan_override
        )
        base_logits = forward(config, params, batch)
        base_loss, base_grads = loss_and_grads(config, params, batch, None, targets)
        if bypassed:
            results.append(
                VerifyResult(pattern.value, batch.num_tokens, plan.gamma, True,
                             0.0, 0.0, 0.0, 0.0)
            )
            continue
        radix_logits = forward(config, params, batch, plan=plan)
        _, radix_grads = loss_and_grads(config, params, batch, plan, targets)
        dlogit = np.abs(radix_logits - base_logits)
        rels = []
        for name in base_grads:
            scale = max(float(np.max(np.abs(base_grads[name]))), 1e-30)
            rels.append(np.abs(radix_grads[name] - base_grads[name]) / scale)
        rel_all = np.concatenate([r.reshape(-1) for r in rels])
        results.append(
            VerifyResult(
                pattern.value,
                batch.num_tokens,
                plan.gamma,
                False,
                float(dlogit.max()),
                float(dlogit.mean()),
                float(rel_all.max()),
                float(rel_all.mean()),
            )
        )
    return results


@dataclass
class BenchReport:
    spec: str
    N: int
    N_compact: int
    gamma: float
    plan_us: float
    fwd_base_us: float | None
    fwd_radix_us: float | None
    rowops_base: int
    rowops_radix: int
    pred_speedup: float

    CSV_FIELDS = (
        "spec,N,N_compact,gamma,plan_us,fwd_base_us,fwd_radix_us,"
        "rowops_base,rowops_radix,pred_speedup"
    ).split(",")

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up discarded
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def run_bench(
    specs,
    config: ModelConfig | None = None,
    repeats: int = 3,
    threshold: float = 0.95,
    run_forward: bool = False,
) -> list[BenchReport]:
    """Plan-build timing and (optionally) forward timing per synthetic spec.

    Forward timing needs model parameters and is opt-in; plan statistics and
    the analytical prediction are always produced. When gamma stays above
    the threshold the compact forward pass is skipped entirely.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    params = init_params(config, seed=0) if (config and run_forward) else None
    reports = []
    for spec in specs:
        batch = make_synthetic_batch(spec)
        plan = build_plan(batch)  # timing includes JIT warm-up discard
        plan_s = _median_time(lambda: build_plan(batch), repeats)
        n, n_compact = plan.n_original, plan.n_compact
        phases_per_pass = 1 + 6 * (config.num_layers if config else 2) + 2
        rowops_base = phases_per_pass * n
        rowops_radix = phases_per_pass * n_compact
        fwd_base = fwd_radix = None
        enabled = should_enable(plan, threshold)
        if params is not None:
            fwd_base = _median_time(lambda: forward(config, params, batch), repeats)
            if enabled:
                fwd_radix = _median_time(
                    lambda: forward(config, params, batch, plan=plan), repeats
                )
            ledger_base, ledger_radix = FlopLedger(), FlopLedger()
            forward(config, params, batch, ledger=ledger_base)
            rowops_base = ledger_base.positionwise_row_ops
            if enabled:
                forward(config, params, batch, plan=plan, ledger=ledger_radix)
                rowops_radix = ledger_radix.positionwise_row_ops
            else:
                rowops_radix = rowops_base
        d = config.hidden_size if config else 256
        d_int = config.intermediate_size if config else 512
        pred = cost.predict(
            cost.CostInputs(d=d, d_int=d_int, L=spec.prefix_len + spec.suffix_len,
                            B=spec.B, P=spec.prefix_len, S=spec.suffix_len)
        )
        reports.append(
            BenchReport(
                spec=spec.label,
                N=n,
                N_compact=n_compact,
                gamma=plan.gamma,
                plan_us=plan_s * 1e6,
                fwd_base_us=fwd_base * 1e6 if fwd_base is not None else None,
                fwd_radix_us=fwd_radix * 1e6 if fwd_radix is not None else None,
                rowops_base=rowops_base,
                rowops_radix=rowops_radix,
                pred_speedup=pred.predicted_speedup,
            )
        )
    return reports


def reports_to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BenchReport.CSV_FIELDS)
    writer.writeheader()
    for r in reports:
        writer.writerow({k: ("" if v is None else v) for k, v in r.to_json().items()})
    return buf.getvalue()


def reports_to_json(reports: list[BenchReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=1)


@dataclass
class PipelineReport:
    total_s: float
    build_s: list
    compute_s: list
    tokens: int
    hidden_fraction: float

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens / self.total_s if self.total_s else float("inf")


_SENTINEL = object()


def pipelined_run(
    batches,
    worker,
    plan_builder=build_plan,
    queue_capacity: int = 2,
) -> PipelineReport:
    """Two-stage pipeline: a producer thread builds the plan for batch t+1
    while the worker consumes batch t through a bounded queue.

    ``worker(batch, plan)`` runs on the caller's thread; its exceptions are
    re-raised as WorkerPanic carrying the batch index. Scheduling never
    changes results: plans are identical to sequential construction.
    """
    batches = list(batches)
    handoff: queue.Queue = queue.Queue(maxsize=max(1, queue_capacity))
    build_times: list[float] = []
    producer_error: list[BaseException] = []

    def produce():
        try:
            for idx, batch in enumerate(batches):
                t0 = time.perf_counter()
                plan = plan_builder(batch)
                build_times.append(time.perf_counter() - t0)
                handoff.put((idx, batch, plan))
        except BaseException as exc:  # surfaced on the consumer side
            producer_error.append(exc)
        finally:
            handoff.put(_SENTINEL)

    compute_times = []
    start = time.perf_counter()
    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    while True:
        item = handoff.get()
        if item is _SENTINEL:
            break
        idx, batch, plan = item
        t0 = time.perf_counter()
        try:
            worker(batch, plan)
        except Exception as exc:
            thread.join()
            raise WorkerPanic(idx, str(exc)) from exc
        compute_times.append(time.perf_counter() - t0)
    thread.join()
    if producer_error:
        raise producer_error[0]
    total = time.perf_counter() - start
    sequential = sum(build_times) + sum(compute_times)
    hidden = max(0.0, sequential - total)
    denom = sum(build_times)
    return PipelineReport(
        total_s=total,
        build_s=build_times,
        compute_s=compute_times,
        tokens=sum(b.num_tokens for b in batches),
        hidden_fraction=min(1.0, hidden / denom) if denom > 0 else 0.0,
    )
