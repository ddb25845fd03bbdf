"""Exploration tree: the complete state of a nested sampling run.

Every node is a point sampled from the prior under the likelihood threshold
of its parent. Classic runs, dynamic runs, resumed runs and merged runs are
all just trees; integrating a tree breadth-first yields the evidence.
"""

import bisect
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    TextIO,
    Tuple,
    Union,
)

import numpy as np

from .exceptions import (
    ContractViolationException,
    DataException,
    InvalidArgumentException,
    NestkitException,
    NotFoundException,
    ParseException,
)
from .schema import FORMAT_VERSION

logger = logging.getLogger(__name__)

ROOT_ID = 0
TREE_MAGIC = "# nestkit-tree"
_EMPTY = "-"


@dataclass(eq=False)
class Node:
    """A sampled point (or the root, which stands for the whole prior)."""
    id: int
    parent_id: Optional[int]
    log_likelihood: float
    point_unit: Optional[np.ndarray] = None
    point_physical: Optional[np.ndarray] = None
    children_ids: List[int] = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.parent_id is None

    def same_as(self, other: "Node") -> bool:
        """Node-for-node equality, bit-exact on floating point fields."""
        if (self.id, self.parent_id, self.children_ids) != (
            other.id,
            other.parent_id,
            other.children_ids,
        ):
            return False
        if float(self.log_likelihood).hex() != float(other.log_likelihood).hex():
            return False
        return _same_array(self.point_unit, other.point_unit) and _same_array(
            self.point_physical, other.point_physical
        )


def _same_array(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.tobytes() == b.tobytes()


class ExplorationTree:
    """Mutable, single-writer run tree indexed by node id."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise InvalidArgumentException(
                f"dimension must be at least 1, got {dimension}", argument="dimension"
            )
        self.dimension = int(dimension)
        self.root_id = ROOT_ID
        self.nodes: Dict[int, Node] = {ROOT_ID: Node(ROOT_ID, None, -math.inf)}
        self._next_id = ROOT_ID + 1
        self._listeners: List[Callable[[Node], None]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExplorationTree):
            return NotImplemented
        if self.dimension != other.dimension or self.nodes.keys() != other.nodes.keys():
            return False
        return all(node.same_as(other.nodes[i]) for i, node in self.nodes.items())

    __hash__ = None  # type: ignore[assignment]

    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFoundException("node", node_id)

    def children_ids(self, node_id: int) -> List[int]:
        return self.node(node_id).children_ids

    def root_children(self) -> List[int]:
        return self.nodes[self.root_id].children_ids

    def iter_nodes(self) -> Iterator[Node]:
        """Non-root nodes in id (sampling) order."""
        for node_id in sorted(self.nodes):
            if node_id != self.root_id:
                yield self.nodes[node_id]

    @property
    def non_root_count(self) -> int:
        return len(self.nodes) - 1

    def add_listener(self, callback: Callable[[Node], None]) -> None:
        """Call ``callback`` with every node attached from now on."""
        self._listeners.append(callback)

    def remove_listener(self, callback: Callable[[Node], None]) -> None:
        self._listeners.remove(callback)

    def attach_child(
        self,
        parent_id: int,
        point_unit: Sequence[float],
        point_physical: Sequence[float],
        log_likelihood: float,
    ) -> int:
        """Attach a point sampled under ``parent_id``'s threshold; returns its id."""
        node_id = self._next_id
        self._insert(node_id, parent_id, point_unit, point_physical, log_likelihood)
        return node_id

    def _insert(
        self,
        node_id: int,
        parent_id: int,
        point_unit: Sequence[float],
        point_physical: Sequence[float],
        log_likelihood: float,
    ) -> Node:
        parent = self.node(parent_id)
        log_l = float(log_likelihood)
        if math.isnan(log_l):
            raise DataException("log-likelihood is NaN", node_id=node_id)
        if log_l < parent.log_likelihood:
            raise ContractViolationException(
                f"child logL {log_l!r} is below parent {parent_id} logL "
                f"{parent.log_likelihood!r}",
                node_id=node_id,
            )
        unit = np.array(point_unit, dtype=float).reshape(-1)
        if unit.shape != (self.dimension,):
            raise InvalidArgumentException(
                f"unit point has {unit.size} coordinates, "
                f"tree dimension is {self.dimension}",
                argument="point_unit",
            )
        physical = np.array(point_physical, dtype=float).reshape(-1)
        if node_id in self.nodes:
            raise InvalidArgumentException(
                f"duplicate node id {node_id}", argument="node_id"
            )

        node = Node(node_id, parent_id, log_l, unit, physical)
        self.nodes[node_id] = node
        parent.children_ids.append(node_id)
        self._next_id = max(self._next_id, node_id + 1)
        for listener in self._listeners:
            listener(node)
        return node

    def unlink_root_children(
        self, keep_indices: Iterable[int], reattach: bool = False
    ) -> "TreeView":
        """Read-only view where only the selected root-children subtrees remain."""
        return TreeView(self, keep_indices, reattach=reattach)

    def truncated(self, node_count: int) -> "ExplorationTree":
        """Copy holding the root plus the first ``node_count`` nodes by id."""
        copy = ExplorationTree(self.dimension)
        for node in list(self.iter_nodes())[:node_count]:
            copy._insert(
                node.id,
                node.parent_id,
                node.point_unit,
                node.point_physical,
                node.log_likelihood,
            )
        return copy


class TreeView:
    """Logical K-fold view over a tree; never mutates the underlying tree.

    With ``reattach`` on, descendants of hidden root children re-enter the
    view under the retained node whose log-likelihood is the smallest value
    still at or above their original sampling threshold (and not above the
    point itself).
    """

    def __init__(
        self, tree: ExplorationTree, keep_indices: Iterable[int], reattach: bool = False
    ):
        keep = sorted(set(int(i) for i in keep_indices))
        root_children = tree.root_children()
        if not keep:
            raise InvalidArgumentException("keep set is empty", argument="keep_indices")
        if keep[0] < 0 or keep[-1] >= len(root_children):
            raise InvalidArgumentException(
                f"keep indices must lie in 0..{len(root_children) - 1}",
                argument="keep_indices",
            )

        self.tree = tree
        self.dimension = tree.dimension
        self.root_id = tree.root_id
        self.reattach = reattach
        self._root_children = [root_children[i] for i in keep]
        self._visible: Set[int] = set()
        stack = list(self._root_children)
        while stack:
            node_id = stack.pop()
            self._visible.add(node_id)
            stack.extend(tree.children_ids(node_id))

        self._extra_children: Dict[int, List[int]] = defaultdict(list)
        if reattach:
            self._reattach()

    def _reattach(self) -> None:
        tree = self.tree
        ladder: List[Tuple[float, int]] = sorted(
            (tree.node(i).log_likelihood, i) for i in self._visible
        )
        for node in tree.iter_nodes():
            if node.id in self._visible or node.parent_id == self.root_id:
                continue
            if node.parent_id in self._visible:
                # follows its reattached parent
                self._visible.add(node.id)
                bisect.insort(ladder, (node.log_likelihood, node.id))
                continue
            parent = tree.node(node.parent_id)  # type: ignore[arg-type]
            threshold = parent.log_likelihood
            idx = bisect.bisect_left(ladder, (threshold, -1))
            if idx < len(ladder) and ladder[idx][0] <= node.log_likelihood:
                host = ladder[idx][1]
                self._extra_children[host].append(node.id)
                self._visible.add(node.id)
                bisect.insort(ladder, (node.log_likelihood, node.id))
        moved = sum(len(v) for v in self._extra_children.values())
        logger.debug(f"Re-attached {moved} orphaned subtrees")

    def node(self, node_id: int) -> Node:
        if node_id != self.root_id and node_id not in self._visible:
            raise NotFoundException("node in view", node_id)
        return self.tree.node(node_id)

    def children_ids(self, node_id: int) -> List[int]:
        if node_id == self.root_id:
            return self._root_children
        children = self.tree.children_ids(node_id)
        extra = self._extra_children.get(node_id)
        return children + extra if extra else children

    def root_children(self) -> List[int]:
        return self._root_children

    @property
    def non_root_count(self) -> int:
        return len(self._visible)

    def __len__(self) -> int:
        return len(self._visible) + 1


TreeLike = Union[ExplorationTree, TreeView]


def create_tree(dimension: int) -> ExplorationTree:
    """A lone root node standing for the full prior volume."""
    return ExplorationTree(dimension)


def merge_trees(trees: Sequence[ExplorationTree]) -> ExplorationTree:
    """Merge independent runs by merging their root nodes.

    Node ids are reassigned tree by tree in sampling order, so merging is
    associative up to relabeling.
    """
    if not trees:
        raise InvalidArgumentException(
            "need at least one tree to merge", argument="trees"
        )
    dimension = trees[0].dimension
    for tree in trees[1:]:
        if tree.dimension != dimension:
            raise InvalidArgumentException(
                f"dimension mismatch: {tree.dimension} != {dimension}", argument="trees"
            )

    merged = ExplorationTree(dimension)
    for tree in trees:
        mapping = {tree.root_id: merged.root_id}
        for node in tree.iter_nodes():
            mapping[node.id] = merged.attach_child(
                mapping[node.parent_id],  # type: ignore[index]
                node.point_unit,  # type: ignore[arg-type]
                node.point_physical,  # type: ignore[arg-type]
                node.log_likelihood,
            )
    logger.debug(f"Merged {len(trees)} trees into {merged.non_root_count} nodes")
    return merged


def _format_vector(values: Optional[np.ndarray]) -> str:
    if values is None or values.size == 0:
        return _EMPTY
    return ",".join(repr(float(v)) for v in values)


def format_node_record(node: Node) -> str:
    """One tab-separated record: id, parent, logL (hex), unit point, physical point."""
    parent = _EMPTY if node.parent_id is None else str(node.parent_id)
    return "\t".join(
        [
            str(node.id),
            parent,
            float(node.log_likelihood).hex(),
            _format_vector(node.point_unit),
            _format_vector(node.point_physical),
        ]
    )


def format_header(dimension: int) -> str:
    return f"{TREE_MAGIC} version={FORMAT_VERSION} dimension={dimension}"


def serialize_tree(tree: ExplorationTree) -> bytes:
    """Line-delimited text: header record, then one node per line in id order."""
    lines = [
        format_header(tree.dimension), format_node_record(tree.nodes[tree.root_id])
    ]
    lines.extend(format_node_record(node) for node in tree.iter_nodes())
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_header(line: str) -> int:
    if not line.startswith(TREE_MAGIC):
        raise ParseException("missing nestkit-tree header", line=1, offset=0)
    fields: Dict[str, str] = {}
    for token in line[len(TREE_MAGIC):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseException(
                f"bad header token {token!r}", line=1, offset=line.find(token)
            )
        fields[key] = value
    try:
        version = int(fields["version"])
        dimension = int(fields["dimension"])
    except (KeyError, ValueError):
        raise ParseException(
            "header needs integer version and dimension", line=1, offset=0
        )
    if version != FORMAT_VERSION:
        raise ParseException(
            f"unsupported tree format version {version}", line=1, offset=0
        )
    if dimension < 1:
        raise ParseException(
            f"dimension must be positive, got {dimension}", line=1, offset=0
        )
    return dimension


def _parse_vector(text: str) -> np.ndarray:
    if text == _EMPTY:
        return np.empty(0)
    return np.array([float(v) for v in text.split(",")], dtype=float)


def _parse_record(
    line: str, line_no: int
) -> Tuple[int, Optional[int], float, np.ndarray, np.ndarray]:
    fields = line.split("\t")
    if len(fields) != 5:
        raise ParseException(
            f"expected 5 fields, found {len(fields)}", line=line_no, offset=0
        )
    offsets = [0]
    for f in fields[:-1]:
        offsets.append(offsets[-1] + len(f) + 1)
    index = 0
    try:
        node_id = int(fields[0])
        index = 1
        parent_id = None if fields[1] == _EMPTY else int(fields[1])
        index = 2
        log_l = float.fromhex(fields[2])
        index = 3
        unit = _parse_vector(fields[3])
        index = 4
        physical = _parse_vector(fields[4])
    except ValueError as e:
        raise ParseException(str(e), line=line_no, offset=offsets[index])
    return node_id, parent_id, log_l, unit, physical


def deserialize_tree(data: bytes, allow_truncated: bool = False) -> ExplorationTree:
    """Rebuild a tree from :func:`serialize_tree` output.

    With ``allow_truncated`` an unterminated last line (an interrupted
    append) is dropped instead of rejected.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseException(f"not utf-8 text: {e.reason}", line=1, offset=e.start)
    if not text.strip():
        raise ParseException("empty stream", line=1, offset=0)

    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    elif allow_truncated and len(lines) > 2:
        dropped = lines.pop()
        logger.warning(
            f"Dropping unterminated final tree record ({len(dropped)} bytes)"
        )

    tree = ExplorationTree(_parse_header(lines[0]))
    if len(lines) < 2:
        raise ParseException("missing root record", line=2, offset=0)
    root_id, root_parent, root_log_l, _, _ = _parse_record(lines[1], 2)
    if root_id != ROOT_ID or root_parent is not None or root_log_l != -math.inf:
        raise ParseException(
            "first record must be the root with logL -inf", line=2, offset=0
        )

    previous = ROOT_ID
    for line_no, line in enumerate(lines[2:], start=3):
        node_id, parent_id, log_l, unit, physical = _parse_record(line, line_no)
        if parent_id is None:
            raise ParseException("second root record", line=line_no, offset=0)
        if node_id <= previous:
            raise ParseException(
                f"node id {node_id} is not increasing", line=line_no, offset=0
            )
        try:
            tree._insert(node_id, parent_id, unit, physical, log_l)
        except NestkitException as e:
            raise ParseException(str(e), line=line_no, offset=0)
        previous = node_id
    return tree


def read_tree(path: Union[str, Path], allow_truncated: bool = False) -> ExplorationTree:
    return deserialize_tree(Path(path).read_bytes(), allow_truncated=allow_truncated)


def write_tree(path: Union[str, Path], tree: ExplorationTree) -> None:
    Path(path).write_bytes(serialize_tree(tree))


class TreeFileWriter:
    """Append-only writer that keeps a ``.nstree`` file in step with a tree.

    Every attached node is written as soon as it exists, so the file of an
    interrupted run is a valid prefix of the finished one.
    """

    def __init__(self, path: Union[str, Path], tree: ExplorationTree):
        self.path = Path(path)
        self.tree = tree
        self._stream: Optional[TextIO] = open(self.path, "w", encoding="utf-8")
        self._stream.write(format_header(tree.dimension) + "\n")
        self._stream.write(format_node_record(tree.nodes[tree.root_id]) + "\n")
        for node in tree.iter_nodes():
            self._write(node)
        tree.add_listener(self._write)

    def _write(self, node: Node) -> None:
        if self._stream is not None:
            self._stream.write(format_node_record(node) + "\n")

    def flush(self) -> None:
        if self._stream is not None:
            self._stream.flush()

    def close(self) -> None:
        if self._stream is not None:
            self.tree.remove_listener(self._write)
            self._stream.close()
            self._stream = None

    def __enter__(self) -> "TreeFileWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
