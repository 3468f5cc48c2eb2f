"""Files exchanged with the outside world.

* Pod manifests (YAML) carrying per-rank CPU requests/limits and the in-place
  resize policy. Annotations keep the plan's fractions so a set of manifests
  parses back into the exact plan.
* ``processorWeights`` fragments for a decomposition dictionary.
* ``rank,cells`` CSV reports of a finished decomposition, from which a weight
  vector is derived.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import yaml

from .alloc import AllocationPlan, Mode, WeightVector, to_fraction
from .errors import MalformedReport, RankGap, ValidationError

RESIZE_POLICY = (("cpu", "NotRequired"), ("memory", "RestartContainer"))
_ANNOTATION = "rankaware.io"
_MILLI_RE = re.compile(r"^\s*(\d+)m\s*$")
_CORES_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*$")


def format_millicores(value: int) -> str:
    if isinstance(value, bool) or int(value) != value or value < 0:
        raise ValidationError(f"millicores must be a non-negative integer, got {value!r}")
    return f"{int(value)}m"


def parse_millicores(text) -> int:
    """``"182m"`` -> 182; plain core counts such as ``"2"`` or ``"0.25"`` are accepted too."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(text)
    m = _MILLI_RE.match(str(text))
    if m:
        return int(m.group(1))
    m = _CORES_RE.match(str(text))
    if m:
        milli = Fraction(m.group(1)) * 1000
        if milli.denominator != 1:
            raise ValidationError(f"{text!r} is finer than one millicore")
        return int(milli)
    raise ValidationError(f"not a CPU quantity: {text!r}")


@dataclass(frozen=True)
class PodManifestModel:
    pod_name: str
    rank_id: int
    requests_cpu: str
    limits_cpu: Optional[str] = None
    resize_policy: tuple = RESIZE_POLICY
    fraction: Optional[Fraction] = None
    mode: Optional[Mode] = None
    budget_millicores: Optional[int] = None

    @property
    def request_millicores(self) -> int:
        return parse_millicores(self.requests_cpu)

    @property
    def limit_millicores(self) -> Optional[int]:
        return None if self.limits_cpu is None else parse_millicores(self.limits_cpu)

    def to_document(self, container: str = "solver", image: str = "solver:latest") -> dict:
        resources = {"requests": {"cpu": self.requests_cpu}}
        if self.limits_cpu is not None:
            resources["limits"] = {"cpu": self.limits_cpu}
        annotations = {f"{_ANNOTATION}/rank": str(self.rank_id)}
        if self.fraction is not None:
            annotations[f"{_ANNOTATION}/fraction"] = str(self.fraction)
        if self.mode is not None:
            annotations[f"{_ANNOTATION}/mode"] = self.mode.value
        if self.budget_millicores is not None:
            annotations[f"{_ANNOTATION}/budget"] = format_millicores(self.budget_millicores)
        return {
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {
                "name": self.pod_name,
                "labels": {"app": "mpi-solver", "rank": str(self.rank_id)},
                "annotations": annotations,
            },
            "spec": {
                "containers": [{
                    "name": container,
                    "image": image,
                    "resources": resources,
                    "resizePolicy": [
                        {"resourceName": res, "restartPolicy": pol} for res, pol in self.resize_policy
                    ],
                }],
            },
        }


def emit_manifest(plan: AllocationPlan, names: Sequence[str], image: str = "solver:latest") -> list[str]:
    """One YAML pod document per rank. Limits appear only for hard-limit plans."""
    if len(names) != plan.n_ranks:
        raise ValidationError(f"{len(names)} pod names for {plan.n_ranks} ranks")
    docs = []
    for i, name in enumerate(names):
        limit = None if plan.limits_millicores is None else format_millicores(plan.limits_millicores[i])
        model = PodManifestModel(
            pod_name=name,
            rank_id=i,
            requests_cpu=format_millicores(plan.requests_millicores[i]),
            limits_cpu=limit,
            fraction=plan.fractions[i],
            mode=plan.mode,
            budget_millicores=plan.budget_millicores,
        )
        docs.append(yaml.safe_dump(model.to_document(image=image), sort_keys=False))
    return docs


def parse_manifest(text: str) -> PodManifestModel:
    try:
        doc = yaml.safe_load(text)
        meta = doc["metadata"]
        container = doc["spec"]["containers"][0]
        resources = container.get("resources", {})
        requests = resources["requests"]["cpu"]
    except (yaml.YAMLError, KeyError, IndexError, TypeError) as exc:
        raise MalformedReport(f"not a pod manifest with a CPU request: {exc}") from None
    annotations = meta.get("annotations") or {}
    rank = annotations.get(f"{_ANNOTATION}/rank", (meta.get("labels") or {}).get("rank"))
    if rank is None:
        raise MalformedReport(f"pod {meta.get('name')!r} carries no rank label")
    limits = (resources.get("limits") or {}).get("cpu")
    policy = tuple((p["resourceName"], p["restartPolicy"]) for p in container.get("resizePolicy", []))
    fraction = annotations.get(f"{_ANNOTATION}/fraction")
    mode = annotations.get(f"{_ANNOTATION}/mode")
    budget = annotations.get(f"{_ANNOTATION}/budget")
    return PodManifestModel(
        pod_name=meta["name"],
        rank_id=int(rank),
        requests_cpu=str(requests),
        limits_cpu=None if limits is None else str(limits),
        resize_policy=policy,
        fraction=None if fraction is None else Fraction(fraction),
        mode=None if mode is None else Mode.parse(mode),
        budget_millicores=None if budget is None else parse_millicores(budget),
    )


def plan_from_manifests(texts: Sequence[str]) -> AllocationPlan:
    """Rebuild the allocation plan from a full set of rank manifests."""
    models = sorted((parse_manifest(t) for t in texts), key=lambda m: m.rank_id)
    ranks = [m.rank_id for m in models]
    if ranks != list(range(len(models))):
        raise RankGap(f"manifests cover ranks {ranks}, expected 0..{len(models) - 1}")
    requests = [m.request_millicores for m in models]
    limits = [m.limit_millicores for m in models]
    if all(v is None for v in limits):
        limits = None
    elif any(v is None for v in limits):
        raise MalformedReport("some manifests set CPU limits and others do not")
    mode = models[0].mode or (Mode.REQUESTS_ONLY if limits is None else Mode.HARD_LIMITS)
    if any(m.fraction is None for m in models):
        total = sum(requests)
        fractions = [Fraction(r, total) for r in requests]
    else:
        fractions = [m.fraction for m in models]
    return AllocationPlan(
        requests_millicores=tuple(requests),
        budget_millicores=sum(requests),
        mode=mode,
        fractions=tuple(fractions),
        limits_millicores=None if limits is None else tuple(limits),
    )


def _exact_decimal(value: Fraction) -> Optional[str]:
    """Finite decimal spelling of ``value``, or None if it does not terminate."""
    den = value.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return None
    if value.denominator == 1:
        return str(value.numerator)
    digits = max(twos, fives)
    scaled = value * 10 ** digits
    sign = "-" if scaled < 0 else ""
    whole, frac = divmod(abs(int(scaled)), 10 ** digits)
    return f"{sign}{whole}.{str(frac).rjust(digits, '0').rstrip('0')}"


def emit_processor_weights(weights, keyword: str = "processorWeights") -> str:
    """Decomposition-dictionary list of per-rank weights, in rank order.

    Integer and terminating-decimal weights are written as given; other
    rationals are scaled to the smallest integer vector with the same ratios.
    """
    if not isinstance(weights, WeightVector):
        weights = WeightVector(weights)
    spelled = [_exact_decimal(w) for w in weights.weights]
    if any(s is None for s in spelled):
        spelled = [str(v) for v in weights.as_integers()]
    body = "\n".join(f"    {s}" for s in spelled)
    return f"{keyword}\n{len(spelled)}\n(\n{body}\n);\n"


def parse_processor_weights(text: str, keyword: str = "processorWeights") -> WeightVector:
    m = re.search(rf"{re.escape(keyword)}\s*(\d+)?\s*\(([^)]*)\)\s*;", text)
    if not m:
        raise MalformedReport(f"no {keyword} list found")
    values = m.group(2).split()
    if m.group(1) is not None and int(m.group(1)) != len(values):
        raise MalformedReport(f"{keyword} declares {m.group(1)} entries but lists {len(values)}")
    return WeightVector(Fraction(v) for v in values)


@dataclass(frozen=True)
class DecompositionReport:
    n_subdomains: int
    cells_per_subdomain: tuple

    def __post_init__(self):
        object.__setattr__(self, "cells_per_subdomain", tuple(int(c) for c in self.cells_per_subdomain))
        if self.n_subdomains != len(self.cells_per_subdomain):
            raise MalformedReport("subdomain count does not match the cell list")
        if any(c < 0 for c in self.cells_per_subdomain):
            raise MalformedReport("cell counts cannot be negative")

    def to_csv(self, header: bool = True) -> str:
        lines = ["rank,cells"] if header else []
        lines += [f"{i},{c}" for i, c in enumerate(self.cells_per_subdomain)]
        return "\n".join(lines) + "\n"

    def weights(self) -> WeightVector:
        cells = self.cells_per_subdomain
        if any(c == 0 for c in cells):
            raise MalformedReport("an empty subdomain cannot be given a positive weight")
        g = math.gcd(*cells)
        return WeightVector(c // g for c in cells)


def ingest_decomposition_report(text: str):
    """Parse a ``rank,cells`` CSV (header optional) into a report and its weight vector."""
    rows = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or not "".join(row).strip():
            continue
        fields = [f.strip() for f in row]
        if lineno == 1 and fields[0].lower() == "rank":
            continue
        if len(fields) != 2:
            raise MalformedReport(f"line {lineno}: expected rank,cells")
        try:
            rank, cells = int(fields[0]), int(fields[1])
        except ValueError:
            raise MalformedReport(f"line {lineno}: rank and cells must be integers") from None
        if rank < 0 or cells < 0:
            raise MalformedReport(f"line {lineno}: negative value")
        if rank in rows:
            raise MalformedReport(f"line {lineno}: rank {rank} listed twice")
        rows[rank] = cells
    if not rows:
        raise MalformedReport("report lists no subdomains")
    missing = sorted(set(range(max(rows) + 1)) - set(rows))
    if missing:
        raise RankGap(f"report has no entry for rank(s) {missing}")
    report = DecompositionReport(len(rows), tuple(rows[i] for i in range(len(rows))))
    return report, report.weights()
