#!/usr/bin/env python3
"""
Tests for the exploration tree, its text format and merging.
"""

import math

import numpy as np
import pytest

from nestkit.exceptions import (
    ContractViolationException,
    DataException,
    InvalidArgumentException,
    NotFoundException,
    ParseException,
)
from nestkit.tree import (
    TreeFileWriter,
    create_tree,
    deserialize_tree,
    merge_trees,
    read_tree,
    serialize_tree,
)


def random_tree(seed, n_root=4, depth=3, dimension=2):
    """A small tree whose chains climb in log-likelihood."""
    rng = np.random.default_rng(seed)
    tree = create_tree(dimension)
    frontier = []
    for _ in range(n_root):
        u = rng.random(dimension)
        frontier.append(
            tree.attach_child(tree.root_id, u, u * 2.0, float(rng.normal()))
        )
    for _ in range(depth):
        grown = []
        for parent_id in frontier:
            u = rng.random(dimension)
            log_l = tree.node(parent_id).log_likelihood + float(rng.exponential())
            grown.append(tree.attach_child(parent_id, u, u * 2.0, log_l))
        frontier = grown
    return tree


def test_root_and_attach():
    """The root stands for the prior and children get increasing ids."""
    tree = create_tree(3)
    assert tree.root_id == 0
    assert tree.node(0).log_likelihood == -math.inf
    assert tree.non_root_count == 0

    a = tree.attach_child(0, [0.1, 0.2, 0.3], [1.0, 2.0, 3.0], -1.0)
    b = tree.attach_child(a, [0.4, 0.5, 0.6], [4.0, 5.0, 6.0], -0.5)
    assert (a, b) == (1, 2)
    assert tree.root_children() == [a]
    assert tree.children_ids(a) == [b]
    assert tree.node(b).parent_id == a
    assert [n.id for n in tree.iter_nodes()] == [1, 2]


def test_attach_rejects_child_below_parent():
    """A child may tie its parent but never sit below it."""
    tree = create_tree(1)
    parent = tree.attach_child(0, [0.5], [0.5], 2.0)
    tree.attach_child(parent, [0.4], [0.4], 2.0)
    with pytest.raises(ContractViolationException):
        tree.attach_child(parent, [0.3], [0.3], 1.999)


def test_attach_rejects_nan_and_wrong_dimension():
    tree = create_tree(2)
    with pytest.raises(DataException):
        tree.attach_child(0, [0.1, 0.2], [0.1, 0.2], float("nan"))
    with pytest.raises(InvalidArgumentException):
        tree.attach_child(0, [0.1], [0.1], 0.0)
    with pytest.raises(NotFoundException):
        tree.node(42)


def test_serialize_round_trip_is_bit_exact():
    """Tree -> bytes -> tree keeps every float bit, including -inf and tiny values."""
    tree = random_tree(7)
    tree.attach_child(0, [1e-300, 0.5], [5e-324, -0.0], -1e308)
    data = serialize_tree(tree)
    back = deserialize_tree(data)
    assert back == tree
    assert serialize_tree(back) == data


def test_parse_errors_report_line():
    """Malformed streams raise ParseException with a line number."""
    data = serialize_tree(random_tree(1)).decode()
    lines = data.split("\n")

    bad_version = data.replace("version=1", "version=99", 1).encode()
    with pytest.raises(ParseException) as info:
        deserialize_tree(bad_version)
    assert info.value.details["line"] == 1

    fields = lines[3].split("\t")
    fields[2] = "not-a-float"
    lines[3] = "\t".join(fields)
    with pytest.raises(ParseException) as info:
        deserialize_tree("\n".join(lines).encode())
    assert info.value.details["line"] == 4

    with pytest.raises(ParseException):
        deserialize_tree(b"")


def test_truncated_final_record():
    """An interrupted append is dropped only when truncation is allowed."""
    tree = random_tree(3)
    data = serialize_tree(tree)
    cut = data[: len(data) - 7]
    with pytest.raises(ParseException):
        deserialize_tree(cut)
    prefix = deserialize_tree(cut, allow_truncated=True)
    assert prefix.non_root_count == tree.non_root_count - 1
    assert prefix == tree.truncated(tree.non_root_count - 1)


def test_file_writer_matches_serialization(tmp_path):
    """The append-only writer produces the same bytes as a one-shot write."""
    tree = create_tree(2)
    tree.attach_child(0, [0.1, 0.1], [0.1, 0.1], -3.0)
    path = tmp_path / "run.nstree"
    with TreeFileWriter(path, tree) as writer:
        first = tree.attach_child(1, [0.2, 0.2], [0.2, 0.2], -2.0)
        writer.flush()
        tree.attach_child(first, [0.3, 0.3], [0.3, 0.3], -1.0)
    tree.attach_child(0, [0.9, 0.9], [0.9, 0.9], -5.0)  # after close: not written

    assert read_tree(path) == tree.truncated(3)


def test_merge_counts_and_roots():
    """Merging k and m root children gives k + m root children and all nodes."""
    a, b = random_tree(1, n_root=3), random_tree(2, n_root=5)
    merged = merge_trees([a, b])
    assert len(merged.root_children()) == 8
    assert merged.non_root_count == a.non_root_count + b.non_root_count
    assert merge_trees([a]) == a


def test_merge_is_associative():
    a, b, c = random_tree(1), random_tree(2, n_root=2), random_tree(3, depth=1)
    left = merge_trees([merge_trees([a, b]), c])
    right = merge_trees([a, merge_trees([b, c])])
    assert left == right
    assert left == merge_trees([a, b, c])


def test_merge_rejects_dimension_mismatch():
    with pytest.raises(InvalidArgumentException):
        merge_trees([random_tree(1, dimension=2), random_tree(2, dimension=3)])
    with pytest.raises(InvalidArgumentException):
        merge_trees([])


def test_fold_view_hides_subtrees():
    """A view keeps only the chosen root children and their descendants."""
    tree = random_tree(5, n_root=4, depth=2)
    view = tree.unlink_root_children([0, 2])
    kept = tree.root_children()
    assert view.root_children() == [kept[0], kept[2]]
    assert view.non_root_count == 6
    hidden_child = tree.children_ids(kept[1])[0]
    with pytest.raises(NotFoundException):
        view.node(hidden_child)
    assert tree.non_root_count == 12

    with pytest.raises(InvalidArgumentException):
        tree.unlink_root_children([])
    with pytest.raises(InvalidArgumentException):
        tree.unlink_root_children([4])


def test_fold_view_reattach():
    """Reattached descendants hang under a retained node at or above their threshold."""
    tree = create_tree(1)
    low = tree.attach_child(0, [0.1], [0.1], 0.0)
    high = tree.attach_child(0, [0.2], [0.2], 5.0)
    orphan = tree.attach_child(low, [0.3], [0.3], 6.0)

    view = tree.unlink_root_children([1], reattach=True)
    assert view.children_ids(high) == [orphan]
    assert view.non_root_count == 2
