"""Composable decision-tree functions over named numeric inputs.

Metric formulas are authored as structured JSON documents (grammar in
``docs/formats.md``) and evaluated purely: same tree, same bindings, same
result, bit for bit. Trees can call other named trees, so small building
blocks compose into larger scoring functions; the output of one tree feeds
the next through explicit argument bindings.

A tree document looks like::

    {"name": "double", "inputs": ["x"],
     "root": {"kind": "binary", "op": "*",
              "left": {"kind": "const", "value": 2},
              "right": {"kind": "input", "name": "x"}}}

Node kinds: ``input``, ``const``, ``unary`` (neg, abs, sqrt, exp, log),
``binary`` (+, -, *, /, min, max, pow), ``if`` (predicate comparing two
subexpressions), ``weighted`` (weight in [0,1] plus identity / clamp /
logistic activation), ``call`` (invoke a registered tree with argument
bindings) and ``return`` (marks the value handed back to a calling tree).

Recursive calls are refused unless every tree on the cycle sets
``"recursive": true``, and even then evaluation depth is capped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .errors import EngineError


class ExprSyntaxError(EngineError):
    code = "expr_syntax"

    def __init__(self, position: str, message: str):
        super().__init__(f"{position}: {message}", position=position)
        self.position = position


class UnknownInput(EngineError):
    code = "expr_unknown_input"


class UnknownSubtree(EngineError):
    code = "expr_unknown_subtree"


class CycleWithoutRecursionFlag(EngineError):
    code = "expr_cycle"


class MissingBinding(EngineError):
    code = "expr_missing_binding"


class DivisionByZero(EngineError):
    code = "expr_division_by_zero"


class RecursionDepthExceeded(EngineError):
    code = "expr_recursion_depth"


class NonFiniteResult(EngineError):
    code = "expr_non_finite"


UNARY_OPS = ("neg", "abs", "sqrt", "exp", "log")
BINARY_OPS = ("+", "-", "*", "/", "min", "max", "pow")
COMPARATORS = ("<", "<=", "=", ">=", ">")

DEFAULT_RECURSION_LIMIT = 64


@dataclass(frozen=True)
class Activation:
    kind: str  # identity | clamp | logistic
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class InputRef:
    name: str


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Unary:
    op: str
    child: "ExprNode"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "ExprNode"
    right: "ExprNode"


@dataclass(frozen=True)
class Conditional:
    left: "ExprNode"
    cmp: str
    right: "ExprNode"
    then: "ExprNode"
    orelse: "ExprNode"


@dataclass(frozen=True)
class Weighted:
    child: "ExprNode"
    weight: float
    activation: Activation


@dataclass(frozen=True)
class Call:
    tree: str
    args: tuple[tuple[str, "ExprNode"], ...]


@dataclass(frozen=True)
class Return:
    child: "ExprNode"


ExprNode = InputRef | Const | Unary | Binary | Conditional | Weighted | Call | Return


@dataclass(frozen=True)
class ExprTree:
    name: str
    declared_inputs: tuple[str, ...]
    root: ExprNode
    recursive: bool
    free: frozenset[str]  # inputs whose absent binding makes eval fail
    calls: frozenset[str]  # names of trees referenced by call nodes


def _number_field(doc: Mapping, key: str, position: str) -> float:
    value = doc.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ExprSyntaxError(position, f"{key} must be a number, got {value!r}")
    if not math.isfinite(float(value)):
        raise ExprSyntaxError(position, f"{key} must be finite")
    return float(value)


def _parse_activation(doc: Any, position: str) -> Activation:
    if doc is None or doc == "identity":
        return Activation("identity")
    if doc == "logistic":
        return Activation("logistic")
    if isinstance(doc, Mapping) and "clamp" in doc:
        bounds = doc["clamp"]
        if (not isinstance(bounds, (list, tuple)) or len(bounds) != 2
                or any(isinstance(b, bool) or not isinstance(b, (int, float)) for b in bounds)):
            raise ExprSyntaxError(position, "clamp activation needs [lo, hi]")
        lo, hi = float(bounds[0]), float(bounds[1])
        if not lo < hi:
            raise ExprSyntaxError(position, f"clamp bounds must satisfy lo < hi, got {lo}, {hi}")
        return Activation("clamp", lo, hi)
    raise ExprSyntaxError(position, f"unknown activation {doc!r}")


def _parse_node(doc: Any, declared: tuple[str, ...], position: str) -> ExprNode:
    if not isinstance(doc, Mapping):
        raise ExprSyntaxError(position, f"node must be an object, got {type(doc).__name__}")
    kind = doc.get("kind")
    if kind == "input":
        name = doc.get("name")
        if not isinstance(name, str) or not name:
            raise ExprSyntaxError(position, "input node needs a name")
        if name not in declared:
            raise UnknownInput(f"{position}: input {name!r} is not declared", name=name)
        return InputRef(name)
    if kind == "const":
        return Const(_number_field(doc, "value", position))
    if kind == "unary":
        op = doc.get("op")
        if op not in UNARY_OPS:
            raise ExprSyntaxError(position, f"unknown unary op {op!r}")
        return Unary(op, _parse_node(doc.get("child"), declared, position + ".child"))
    if kind == "binary":
        op = doc.get("op")
        if op not in BINARY_OPS:
            raise ExprSyntaxError(position, f"unknown binary op {op!r}")
        return Binary(op,
                      _parse_node(doc.get("left"), declared, position + ".left"),
                      _parse_node(doc.get("right"), declared, position + ".right"))
    if kind == "if":
        cond = doc.get("cond")
        if not isinstance(cond, Mapping):
            raise ExprSyntaxError(position + ".cond", "if node needs a cond object")
        cmp = cond.get("cmp")
        if cmp == "==":
            cmp = "="
        if cmp not in COMPARATORS:
            raise ExprSyntaxError(position + ".cond", f"unknown comparator {cond.get('cmp')!r}")
        return Conditional(
            _parse_node(cond.get("left"), declared, position + ".cond.left"),
            cmp,
            _parse_node(cond.get("right"), declared, position + ".cond.right"),
            _parse_node(doc.get("then"), declared, position + ".then"),
            _parse_node(doc.get("else"), declared, position + ".else"),
        )
    if kind == "weighted":
        weight = _number_field(doc, "weight", position)
        if not 0.0 <= weight <= 1.0:
            raise ExprSyntaxError(position, f"weight must be in [0,1], got {weight}")
        return Weighted(
            _parse_node(doc.get("child"), declared, position + ".child"),
            weight,
            _parse_activation(doc.get("activation"), position + ".activation"),
        )
    if kind == "call":
        target = doc.get("tree")
        if not isinstance(target, str) or not target:
            raise ExprSyntaxError(position, "call node needs a tree name")
        args_doc = doc.get("args") or {}
        if not isinstance(args_doc, Mapping):
            raise ExprSyntaxError(position + ".args", "call args must be an object")
        args = tuple(sorted(
            (name, _parse_node(node, declared, f"{position}.args.{name}"))
            for name, node in args_doc.items()))
        return Call(target, args)
    if kind == "return":
        return Return(_parse_node(doc.get("child"), declared, position + ".child"))
    raise ExprSyntaxError(position, f"unknown node kind {kind!r}")


def _collect(node: ExprNode, inputs: set[str], calls: set[str]) -> None:
    if isinstance(node, InputRef):
        inputs.add(node.name)
    elif isinstance(node, Unary):
        _collect(node.child, inputs, calls)
    elif isinstance(node, Binary):
        _collect(node.left, inputs, calls)
        _collect(node.right, inputs, calls)
    elif isinstance(node, Conditional):
        for child in (node.left, node.right, node.then, node.orelse):
            _collect(child, inputs, calls)
    elif isinstance(node, Weighted):
        _collect(node.child, inputs, calls)
    elif isinstance(node, Call):
        calls.add(node.tree)
        # Callee inputs are satisfied by the argument expressions, so only
        # those expressions contribute to the caller's free inputs.
        for _, arg in node.args:
            _collect(arg, inputs, calls)
    elif isinstance(node, Return):
        _collect(node.child, inputs, calls)


def parse_tree(document: Mapping, registry: "ExprRegistry | None" = None) -> ExprTree:
    """Parse and validate one tree document.

    With a registry, call targets are resolved immediately (unknown names and
    unflagged cycles are errors) and the tree is added to it. Without one,
    unresolved call names stay visible on ``tree.calls`` for later resolution.
    """
    if not isinstance(document, Mapping):
        raise ExprSyntaxError("$", "tree document must be an object")
    name = document.get("name")
    if not isinstance(name, str) or not name:
        raise ExprSyntaxError("$.name", "tree needs a non-empty name")
    inputs_doc = document.get("inputs", [])
    if not isinstance(inputs_doc, (list, tuple)) or not all(
            isinstance(i, str) and i for i in inputs_doc):
        raise ExprSyntaxError("$.inputs", "inputs must be a list of names")
    declared = tuple(inputs_doc)
    if len(set(declared)) != len(declared):
        raise ExprSyntaxError("$.inputs", "duplicate input names")
    recursive = bool(document.get("recursive", False))
    root = _parse_node(document.get("root"), declared, "$.root")

    used: set[str] = set()
    called: set[str] = set()
    _collect(root, used, called)
    tree = ExprTree(name, declared, root, recursive, frozenset(used), frozenset(called))
    if registry is not None:
        registry.add(tree)
    return tree


class ExprRegistry:
    """Named trees available to call nodes. Validates linkage on every add."""

    def __init__(self) -> None:
        self._trees: dict[str, ExprTree] = {}

    def add(self, tree: ExprTree) -> None:
        self._trees[tree.name] = tree
        self.validate(require_resolved=False)

    def get(self, name: str) -> ExprTree:
        if name not in self._trees:
            raise UnknownSubtree(f"no tree named {name!r} is registered", name=name)
        return self._trees[name]

    def names(self) -> list[str]:
        return sorted(self._trees)

    def __contains__(self, name: str) -> bool:
        return name in self._trees

    def validate(self, require_resolved: bool = True) -> None:
        """Check call targets, argument coverage and recursion flags.

        ``require_resolved=False`` tolerates calls to trees that have not been
        registered yet (multi-document loads register in arbitrary order);
        a final ``validate()`` enforces full resolution.
        """
        for tree in self._trees.values():
            for target in sorted(tree.calls):
                if target not in self._trees:
                    if require_resolved:
                        raise UnknownSubtree(
                            f"tree {tree.name!r} calls unregistered tree {target!r}",
                            name=target)
                    continue
                callee = self._trees[target]
                self._check_call_args(tree, callee)
        self._check_cycles()

    def _check_call_args(self, caller: ExprTree, callee: ExprTree) -> None:
        def walk(node: ExprNode) -> None:
            if isinstance(node, Call) and node.tree == callee.name:
                bound = {name for name, _ in node.args}
                unknown = bound - set(callee.declared_inputs)
                if unknown:
                    raise ExprSyntaxError(
                        f"{caller.name}", f"call to {callee.name!r} binds unknown "
                        f"input(s) {sorted(unknown)}")
                missing = set(callee.free) - bound
                if missing:
                    raise ExprSyntaxError(
                        f"{caller.name}", f"call to {callee.name!r} leaves required "
                        f"input(s) {sorted(missing)} unbound")
            for child in _children(node):
                walk(child)

        walk(caller.root)

    def _check_cycles(self) -> None:
        # Any call-graph cycle is an error unless every member opted in.
        state: dict[str, int] = {}  # 1 = on stack, 2 = done
        stack: list[str] = []

        def visit(name: str) -> None:
            state[name] = 1
            stack.append(name)
            tree = self._trees.get(name)
            if tree is not None:
                for target in sorted(tree.calls):
                    if target not in self._trees:
                        continue
                    if state.get(target) == 1:
                        cycle = stack[stack.index(target):] + [target]
                        unflagged = [n for n in cycle[:-1] if not self._trees[n].recursive]
                        if unflagged:
                            raise CycleWithoutRecursionFlag(
                                "call cycle " + " -> ".join(cycle)
                                + f" includes tree(s) without the recursion flag: {sorted(set(unflagged))}",
                                cycle=cycle[:-1])
                    elif state.get(target) != 2:
                        visit(target)
            stack.pop()
            state[name] = 2

        for name in sorted(self._trees):
            if state.get(name) != 2:
                visit(name)


def load_registry(documents: Iterable[Mapping]) -> ExprRegistry:
    """Parse a batch of tree documents into a fully validated registry."""
    registry = ExprRegistry()
    for document in documents:
        registry.add(parse_tree(document))
    registry.validate()
    return registry


def free_inputs(tree: ExprTree) -> frozenset[str]:
    """Exactly the inputs whose absence from bindings fails evaluation."""
    return tree.free


def _children(node: ExprNode) -> tuple[ExprNode, ...]:
    if isinstance(node, (InputRef, Const)):
        return ()
    if isinstance(node, Unary):
        return (node.child,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    if isinstance(node, Conditional):
        return (node.left, node.right, node.then, node.orelse)
    if isinstance(node, Weighted):
        return (node.child,)
    if isinstance(node, Call):
        return tuple(arg for _, arg in node.args)
    return (node.child,)  # Return


def _check_finite(value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteResult(f"expression produced {value!r}")
    return value


def evaluate(tree: ExprTree, bindings: Mapping[str, float],
             registry: ExprRegistry | None = None,
             max_depth: int = DEFAULT_RECURSION_LIMIT) -> float:
    """Evaluate ``tree`` at ``bindings``. Pure and deterministic.

    Raises :class:`MissingBinding` when a required input is absent,
    :class:`DivisionByZero`, :class:`NonFiniteResult` on overflow or domain
    errors, and :class:`RecursionDepthExceeded` past ``max_depth`` nested
    tree calls.
    """
    return _eval_tree(tree, bindings, registry, depth=0, max_depth=max_depth)


def _eval_tree(tree: ExprTree, bindings: Mapping[str, float],
               registry: ExprRegistry | None, depth: int, max_depth: int) -> float:
    if depth > max_depth:
        raise RecursionDepthExceeded(
            f"evaluation of {tree.name!r} exceeded depth {max_depth}")
    missing = sorted(tree.free - set(bindings))
    if missing:
        raise MissingBinding(f"tree {tree.name!r} is missing binding(s) {missing}",
                             missing=missing)
    env = {}
    for name in tree.free:
        value = float(bindings[name])
        if not math.isfinite(value):
            raise NonFiniteResult(f"binding {name!r} is not finite: {value!r}")
        env[name] = value
    return _eval_node(tree.root, env, tree, registry, depth, max_depth)


def _eval_node(node: ExprNode, env: Mapping[str, float], tree: ExprTree,
               registry: ExprRegistry | None, depth: int, max_depth: int) -> float:
    if isinstance(node, InputRef):
        return env[node.name]
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Unary):
        value = _eval_node(node.child, env, tree, registry, depth, max_depth)
        if node.op == "neg":
            return -value
        if node.op == "abs":
            return abs(value)
        if node.op == "sqrt":
            if value < 0:
                raise NonFiniteResult(f"sqrt of negative value {value}")
            return math.sqrt(value)
        if node.op == "exp":
            try:
                return _check_finite(math.exp(value))
            except OverflowError:
                raise NonFiniteResult(f"exp({value}) overflows") from None
        # log
        if value <= 0:
            raise NonFiniteResult(f"log of non-positive value {value}")
        return math.log(value)
    if isinstance(node, Binary):
        left = _eval_node(node.left, env, tree, registry, depth, max_depth)
        right = _eval_node(node.right, env, tree, registry, depth, max_depth)
        if node.op == "+":
            return _check_finite(left + right)
        if node.op == "-":
            return _check_finite(left - right)
        if node.op == "*":
            return _check_finite(left * right)
        if node.op == "/":
            if right == 0.0:
                raise DivisionByZero(f"division by zero: {left} / 0")
            return _check_finite(left / right)
        if node.op == "min":
            return min(left, right)
        if node.op == "max":
            return max(left, right)
        # pow
        try:
            result = math.pow(left, right)
        except (OverflowError, ValueError) as exc:
            if left == 0.0 and right < 0:
                raise DivisionByZero("zero raised to a negative power") from None
            raise NonFiniteResult(f"pow({left}, {right}) is undefined: {exc}") from None
        return _check_finite(result)
    if isinstance(node, Conditional):
        left = _eval_node(node.left, env, tree, registry, depth, max_depth)
        right = _eval_node(node.right, env, tree, registry, depth, max_depth)
        taken = {
            "<": left < right,
            "<=": left <= right,
            "=": left == right,
            ">=": left >= right,
            ">": left > right,
        }[node.cmp]
        branch = node.then if taken else node.orelse
        return _eval_node(branch, env, tree, registry, depth, max_depth)
    if isinstance(node, Weighted):
        value = _eval_node(node.child, env, tree, registry, depth, max_depth) * node.weight
        if node.activation.kind == "identity":
            return _check_finite(value)
        if node.activation.kind == "clamp":
            return min(max(value, node.activation.lo), node.activation.hi)
        # logistic; result pinned strictly inside (0, 1) even when the float
        # quotient saturates
        if value >= 0:
            squashed = 1.0 / (1.0 + math.exp(-min(value, 700.0)))
        else:
            grown = math.exp(max(value, -700.0))
            squashed = grown / (1.0 + grown)
        return min(max(squashed, math.nextafter(0.0, 1.0)), math.nextafter(1.0, 0.0))
    if isinstance(node, Call):
        if node.tree == tree.name:
            callee = tree
        elif registry is None:
            raise UnknownSubtree(
                f"tree {tree.name!r} calls {node.tree!r} but no registry was supplied",
                name=node.tree)
        else:
            callee = registry.get(node.tree)
        call_bindings = {
            name: _eval_node(arg, env, tree, registry, depth, max_depth)
            for name, arg in node.args
        }
        return _eval_tree(callee, call_bindings, registry, depth + 1, max_depth)
    # Return
    return _eval_node(node.child, env, tree, registry, depth, max_depth)


def _activation_doc(activation: Activation) -> Any:
    if activation.kind == "clamp":
        return {"clamp": [activation.lo, activation.hi]}
    return activation.kind


def node_to_doc(node: ExprNode) -> dict:
    if isinstance(node, InputRef):
        return {"kind": "input", "name": node.name}
    if isinstance(node, Const):
        return {"kind": "const", "value": node.value}
    if isinstance(node, Unary):
        return {"kind": "unary", "op": node.op, "child": node_to_doc(node.child)}
    if isinstance(node, Binary):
        return {"kind": "binary", "op": node.op,
                "left": node_to_doc(node.left), "right": node_to_doc(node.right)}
    if isinstance(node, Conditional):
        return {"kind": "if",
                "cond": {"left": node_to_doc(node.left), "cmp": node.cmp,
                         "right": node_to_doc(node.right)},
                "then": node_to_doc(node.then), "else": node_to_doc(node.orelse)}
    if isinstance(node, Weighted):
        return {"kind": "weighted", "child": node_to_doc(node.child),
                "weight": node.weight, "activation": _activation_doc(node.activation)}
    if isinstance(node, Call):
        return {"kind": "call", "tree": node.tree,
                "args": {name: node_to_doc(arg) for name, arg in node.args}}
    return {"kind": "return", "child": node_to_doc(node.child)}


def tree_to_doc(tree: ExprTree) -> dict:
    doc = {"name": tree.name, "inputs": list(tree.declared_inputs),
           "root": node_to_doc(tree.root)}
    if tree.recursive:
        doc["recursive"] = True
    return doc
