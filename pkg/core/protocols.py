"""Evaluation protocols: per-fold train/calib/test filters over manifest columns.

A protocol file is YAML:

    name: oulu_p3
    train: {subject_id: {between: [1, 20]}}      # base filters, shared by every fold
    calib: {subject_id: {between: [21, 35]}}
    test:  {subject_id: {between: [36, 55]}}
    leave_one_out: {column: device, values: [1, 2, 3, 4, 5, 6]}

or an explicit ``folds:`` list whose entries carry their own train/calib/test
filters (merged with the base ones). A condition is a scalar (equality), a
list (membership) or a mapping of operators: eq, in, not_in, lt, le, gt, ge,
between.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import yaml

from core.errors import DataError, InvalidArgumentError

logger = logging.getLogger(__name__)

PROTOCOL_DIR = Path(__file__).resolve().parent.parent / "protocols"
SPLITS = ("train", "calib", "test")
OPERATORS = ("eq", "in", "not_in", "lt", "le", "gt", "ge", "between")


def _number(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _equal(cell, value):
    a, b = _number(cell), _number(value)
    if a is not None and b is not None:
        return a == b
    return str(cell).strip().upper() == str(value).strip().upper()


def _ordered(cell, value, name):
    a, b = _number(cell), _number(value)
    if a is None or b is None:
        raise InvalidArgumentError(f"operator '{name}' needs numeric values, got {cell!r} and {value!r}")
    return a, b


def _check(cell, op, arg):
    if op == "eq":
        return _equal(cell, arg)
    if op == "in":
        return any(_equal(cell, v) for v in arg)
    if op == "not_in":
        return not any(_equal(cell, v) for v in arg)
    if op == "between":
        a, lo = _ordered(cell, arg[0], op)
        _, hi = _ordered(cell, arg[1], op)
        return lo <= a <= hi
    a, b = _ordered(cell, arg, op)
    return {"lt": a < b, "le": a <= b, "gt": a > b, "ge": a >= b}[op]


@dataclass(frozen=True)
class Condition:
    column: str
    op: str
    arg: object

    def matches(self, row):
        if self.column not in row:
            raise InvalidArgumentError(f"filter on unknown column '{self.column}'")
        return _check(row[self.column], self.op, self.arg)

    def describe(self):
        return f"{self.column} {self.op} {self.arg}"


def _conditions(spec, where):
    if spec is None:
        return ()
    if not isinstance(spec, dict):
        raise InvalidArgumentError(f"{where}: filter must be a mapping of column -> condition")
    out = []
    for column, cond in spec.items():
        if isinstance(cond, dict):
            for op, arg in cond.items():
                if op not in OPERATORS:
                    raise InvalidArgumentError(f"{where}: unknown operator '{op}'")
                if op in ("in", "not_in") and not isinstance(arg, list):
                    arg = [arg]
                if op == "between" and (not isinstance(arg, list) or len(arg) != 2):
                    raise InvalidArgumentError(f"{where}: 'between' takes [low, high]")
                out.append(Condition(str(column), op, tuple(arg) if isinstance(arg, list) else arg))
        elif isinstance(cond, list):
            out.append(Condition(str(column), "in", tuple(cond)))
        else:
            out.append(Condition(str(column), "eq", cond))
    return tuple(out)


@dataclass(frozen=True)
class SplitFilter:
    """Conjunction of column conditions."""
    conditions: tuple = ()

    def matches(self, row):
        return all(c.matches(row) for c in self.conditions)

    def describe(self):
        return " and ".join(c.describe() for c in self.conditions) or "all rows"


@dataclass(frozen=True)
class Fold:
    name: str
    train: SplitFilter
    test: SplitFilter
    calib: SplitFilter | None = None


@dataclass
class ProtocolSpec:
    name: str
    folds: list
    description: str = ""
    source: str = ""

    @property
    def n_folds(self):
        return len(self.folds)

    def fold(self, index):
        if not 0 <= index < len(self.folds):
            raise InvalidArgumentError(f"protocol '{self.name}' has {len(self.folds)} folds, no fold {index}")
        return self.folds[index]


def parse_protocol(data, source=""):
    if not isinstance(data, dict) or "name" not in data:
        raise InvalidArgumentError(f"protocol {source or '<inline>'} must be a mapping with a 'name'")
    name = str(data["name"])
    known = {"name", "description", "folds", "leave_one_out", *SPLITS}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidArgumentError(f"protocol '{name}': unknown key '{unknown[0]}'")
    base = {s: _conditions(data.get(s), f"{name}.{s}") for s in SPLITS}
    has_calib = "calib" in data
    variants = []
    if "folds" in data and "leave_one_out" in data:
        raise InvalidArgumentError(f"protocol '{name}': use either 'folds' or 'leave_one_out'")
    if "leave_one_out" in data:
        loo = data["leave_one_out"]
        column, values = loo.get("column"), loo.get("values")
        if not column or not values:
            raise InvalidArgumentError(f"protocol '{name}': leave_one_out needs 'column' and 'values'")
        for v in values:
            variants.append({
                "name": f"{column}={v}",
                "train": {column: {"not_in": [v]}},
                "test": {column: [v]},
            })
    else:
        variants = data.get("folds") or [{"name": "fold0"}]
    folds = []
    for i, variant in enumerate(variants):
        where = f"{name}.folds[{i}]"
        extra = {s: _conditions(variant.get(s), f"{where}.{s}") for s in SPLITS}
        calib = None
        if has_calib or "calib" in variant:
            calib = SplitFilter(base["calib"] + extra["calib"])
        folds.append(Fold(
            name=str(variant.get("name", f"fold{i}")),
            train=SplitFilter(base["train"] + extra["train"]),
            test=SplitFilter(base["test"] + extra["test"]),
            calib=calib,
        ))
    return ProtocolSpec(name=name, folds=folds, description=str(data.get("description", "")), source=source)


def resolve_protocol_path(ref):
    """A path, or the stem of a file shipped in protocols/."""
    path = Path(ref)
    if path.exists():
        return path
    shipped = PROTOCOL_DIR / f"{path.stem}.yaml"
    if shipped.exists():
        return shipped
    raise DataError(f"protocol '{ref}' not found (looked in {PROTOCOL_DIR})")


def load_protocol(ref):
    if isinstance(ref, ProtocolSpec):
        return ref
    if isinstance(ref, dict):
        return parse_protocol(ref)
    path = resolve_protocol_path(ref)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise DataError(f"cannot read protocol {path}: {exc}") from exc
    spec = parse_protocol(data, str(path))
    logger.debug("Loaded protocol %s with %d folds", spec.name, spec.n_folds)
    return spec


def shipped_protocols():
    return sorted(p.stem for p in PROTOCOL_DIR.glob("*.yaml"))
