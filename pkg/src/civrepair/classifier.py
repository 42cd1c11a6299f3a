"""Type-centric CIV taxonomy and the matching oracle guards."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ParseError
from .fuzzer import CivFinding
from .ingest import (
    CompartmentPolicy,
    HandleType,
    IfaceType,
    InterfaceSpec,
    PointerType,
    ScalarType,
    check_log_against,
)
from .scenario import Predicate


class Category(str, Enum):
    POINTER = "Pointer"
    SCALAR = "Scalar"
    STRUCTURED_PAYLOAD = "StructuredPayload"
    OPAQUE_HANDLE = "OpaqueHandle"


GOAL_LETTER = {"confidentiality": "C", "integrity": "I", "availability": "A"}
LETTER_GOAL = {v: k for k, v in GOAL_LETTER.items()}


@dataclass(frozen=True)
class Impact:
    """Ordinal impact annotation, e.g. ``("A", ">>", "I")`` for A≫I."""

    terms: tuple[str, ...]

    @property
    def goals(self) -> tuple[str, ...]:
        return tuple(LETTER_GOAL[t] for t in self.terms[::2])

    @property
    def dominant(self) -> tuple[str, ...]:
        """Goals in the leading tier (before the first ≫)."""
        tier = [LETTER_GOAL[self.terms[0]]]
        for rel, letter in zip(self.terms[1::2], self.terms[2::2]):
            if rel != "~":
                break
            tier.append(LETTER_GOAL[letter])
        return tuple(tier)

    def __str__(self) -> str:
        return "".join({">>": "≫", "~": "≈"}.get(t, t) for t in self.terms)


@dataclass(frozen=True)
class CivClass:
    category: Category
    boundary_focus: str
    impact: Impact
    patching_unit: str
    oracle: str
    detectability: str

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "boundary_focus": self.boundary_focus,
            "impact": str(self.impact),
            "patching_unit": self.patching_unit,
            "oracle": self.oracle,
            "detectability": self.detectability,
        }


# category -> (boundary focus, impact, patching unit, oracle, detectability advisory)
TABLE = {
    Category.POINTER: ("legality", Impact(("A", ">>", "I")), "pointer-instance", "is_pointer_mapped", "high"),
    Category.SCALAR: ("domain", Impact(("I", ">>", "A")), "scalar-token", "is_in_domain", "high"),
    Category.STRUCTURED_PAYLOAD: (
        "semantic-fields", Impact(("C", "~", "I", ">>", "A")), "field", "hybrid", "medium",
    ),
    Category.OPAQUE_HANDLE: ("handle-validity", Impact(("C", ">>", "I")), "handle-instance", "verify_format", "medium"),
}


def civ_class(category: Category) -> CivClass:
    focus, impact, unit, oracle, detect = TABLE[category]
    return CivClass(category, focus, impact, unit, oracle, detect)


def category_for(leaf: IfaceType, nested: bool) -> Category:
    if nested:
        return Category.STRUCTURED_PAYLOAD
    if isinstance(leaf, PointerType):
        return Category.POINTER
    if isinstance(leaf, ScalarType):
        return Category.SCALAR
    if isinstance(leaf, HandleType):
        return Category.OPAQUE_HANDLE
    raise ParseError(f"cannot classify a {leaf.kind} leaf")


def classify(f: CivFinding, spec: InterfaceSpec) -> CivClass:
    """Return values count as parameters flowing the other way."""
    resolved = check_log_against(f.mutation, spec)
    return civ_class(category_for(resolved.leaf, resolved.nested))


def mutated_leaf(f: CivFinding, spec: InterfaceSpec) -> IfaceType:
    return spec.resolve(f.mutation.entry_function, f.mutation.mutated_path).leaf


@dataclass(frozen=True)
class OracleGuard:
    name: str
    leaf: IfaceType

    def predicate(self, expr: str) -> Predicate:
        """Instantiate the guard on a local expression holding the unit."""
        leaf = self.leaf
        if self.name == "is_pointer_mapped":
            return Predicate("is_pointer_mapped", (expr, leaf.size))
        if self.name == "is_in_domain":
            if leaf.values is not None:
                return Predicate("is_in_domain", (expr, frozenset(leaf.values)))
            lo = leaf.lo if leaf.lo is not None else -(2**63)
            hi = leaf.hi if leaf.hi is not None else 2**63
            return Predicate("is_in_domain", (expr, lo, hi))
        return Predicate("verify_format", (expr, leaf.handle_kind))


_LEAF_ORACLE = {"pointer": "is_pointer_mapped", "scalar": "is_in_domain", "handle": "verify_format"}


def oracle_for(c: CivClass, leaf: IfaceType) -> OracleGuard:
    """Structured payloads resolve the hybrid oracle through the mutated leaf."""
    if c.category is Category.STRUCTURED_PAYLOAD:
        return OracleGuard(_LEAF_ORACLE[leaf.kind], leaf)
    return OracleGuard(c.oracle, leaf)


def impact_summary(c: CivClass, policy: CompartmentPolicy) -> str:
    ordering = str(c.impact)
    declared = [g for g in c.impact.goals if g in policy.security_goals]
    if not declared:
        return f"no declared security goal is affected; impact ordering for {c.category.value} CIVs: {ordering}"
    dominant = [g for g in c.impact.dominant if g in policy.security_goals]
    parts = []
    if dominant:
        parts.append(f"{' and '.join(dominant)} at risk (dominant for {c.category.value} CIVs)")
    rest = [g for g in declared if g not in dominant]
    if rest:
        parts.append(f"{' and '.join(rest)} secondarily affected")
    return "; ".join(parts) + f" [ordering {ordering}]"
