import json

import numpy as np
import pytest

from voxforge.retrieval import (
    CATEGORIES,
    DegenerateInputError,
    EmptyCategoryError,
    GraspStrategy,
    KnowledgeBase,
    KnowledgeBaseFormatError,
    KnowledgeEntry,
    UnknownCategoryError,
    chamfer,
    kb_load,
    kb_save,
    retrieve,
    toy_knowledge_base,
    transfer_strategy,
)
from voxforge.voxel import PointCloud


def brute_force_chamfer(a, b):
    pa, pb = a.points, b.points
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


def cloud(points):
    return PointCloud(np.asarray(points, dtype=float))


def unit_quat():
    return np.array([1.0, 0.0, 0.0, 0.0])


def make_entry(entry_id, category="lift", pts=None, point=(0, 0, 0.05)):
    if pts is None:
        rng = np.random.default_rng(hash(entry_id) % 2**31)
        pts = rng.uniform(-0.05, 0.05, (60, 3))
        pts -= pts.mean(axis=0)
    return KnowledgeEntry(
        entry_id,
        category,
        cloud(pts),
        GraspStrategy(point, unit_quat(), np.linspace(0.1, 0.8, 8)),
    )


class TestChamfer:
    def test_identical_clouds_zero(self):
        c = cloud([[0, 0, 0], [1, 2, 3], [0.5, 0.5, 0.5]])
        assert chamfer(c, c) == 0.0

    def test_hand_case_exactly_two(self):
        assert chamfer(cloud([[0, 0, 0]]), cloud([[1, 0, 0]])) == 2.0

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = cloud(rng.standard_normal((20, 3)))
            b = cloud(rng.standard_normal((35, 3)))
            assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            a = cloud(rng.standard_normal((rng.integers(1, 80), 3)))
            b = cloud(rng.standard_normal((rng.integers(1, 80), 3)))
            fast = chamfer(a, b)
            slow = brute_force_chamfer(a, b)
            assert fast == pytest.approx(slow, rel=1e-9, abs=1e-12)

    def test_nonnegative_and_zero_iff_equal_sets(self):
        a = cloud([[0, 0, 0], [1, 1, 1]])
        b = cloud([[1, 1, 1], [0, 0, 0]])  # same set, different order
        assert chamfer(a, b) == 0.0
        c = cloud([[0, 0, 0], [1, 1, 1.001]])
        assert chamfer(a, c) > 0.0

    def test_empty_cloud_rejected(self):
        with pytest.raises(DegenerateInputError):
            chamfer(cloud(np.zeros((0, 3))), cloud([[0, 0, 0]]))


class TestRetrieve:
    def test_single_entry_category(self):
        kb = KnowledgeBase([make_entry("only", "press")])
        entry, d = retrieve(cloud([[0, 0, 0], [0.01, 0, 0]]), "press", kb)
        assert entry.id == "only"

    def test_query_in_base_gives_zero(self):
        target = make_entry("self", "wrap_grasp")
        kb = KnowledgeBase([target, make_entry("other", "wrap_grasp")])
        entry, d = retrieve(target.cloud, "wrap_grasp", kb)
        assert entry.id == "self"
        assert d == 0.0

    def test_matches_exhaustive_argmin(self):
        rng = np.random.default_rng(7)
        entries = [make_entry(f"e{k}", "handle_grasp") for k in range(3)]
        kb = KnowledgeBase(entries)
        for _ in range(10):
            q = cloud(rng.uniform(-0.05, 0.05, (40, 3)))
            centered = PointCloud(q.points - q.centroid())
            dists = {e.id: chamfer(centered, e.cloud) for e in entries}
            best_id = min(sorted(dists), key=lambda k: dists[k])
            entry, d = retrieve(q, "handle_grasp", kb)
            assert entry.id == best_id
            assert d == pytest.approx(min(dists.values()), rel=1e-12)

    def test_ties_break_by_id(self):
        pts = np.array([[0.01, 0, 0], [-0.01, 0, 0]])
        kb = KnowledgeBase(
            [make_entry("zz", "lift", pts), make_entry("aa", "lift", pts.copy())]
        )
        entry, _ = retrieve(cloud(pts + 5.0), "lift", kb)
        assert entry.id == "aa"

    def test_translation_invariance(self):
        kb = toy_knowledge_base(seed=2)
        rng = np.random.default_rng(3)
        q = cloud(rng.uniform(-0.04, 0.04, (50, 3)))
        e1, d1 = retrieve(q, "lift", kb)
        e2, d2 = retrieve(q.translated([1.0, -2.0, 0.5]), "lift", kb)
        assert e1.id == e2.id
        assert d1 == pytest.approx(d2, rel=1e-9)

    def test_never_crosses_category(self):
        kb = toy_knowledge_base(seed=4)
        rng = np.random.default_rng(5)
        for category in CATEGORIES:
            for _ in range(5):
                q = cloud(rng.uniform(-0.06, 0.06, (30, 3)))
                entry, _ = retrieve(q, category, kb)
                assert entry.category == category

    def test_unknown_category(self):
        kb = toy_knowledge_base(seed=0)
        with pytest.raises(UnknownCategoryError):
            retrieve(cloud([[0, 0, 0]]), "juggle", kb)

    def test_empty_category(self):
        kb = KnowledgeBase([make_entry("a", "lift")])
        with pytest.raises(EmptyCategoryError):
            retrieve(cloud([[0, 0, 0]]), "press", kb)


class TestTransfer:
    def test_identity_transfer(self):
        entry = make_entry("a", "lift", point=(0.01, -0.02, 0.03))
        out = transfer_strategy(entry, entry.cloud)
        np.testing.assert_allclose(out.grasp_point, entry.strategy.grasp_point, atol=1e-12)
        np.testing.assert_array_equal(out.wrist_quat, entry.strategy.wrist_quat)
        np.testing.assert_array_equal(out.joint_angles, entry.strategy.joint_angles)

    def test_uniform_scale_doubles_point(self):
        entry = make_entry("a", "lift", point=(0.01, -0.02, 0.03))
        out = transfer_strategy(entry, PointCloud(entry.cloud.points * 2.0))
        np.testing.assert_allclose(out.grasp_point, 2.0 * entry.strategy.grasp_point, atol=1e-12)

    def test_translation_moves_point(self):
        entry = make_entry("a", "lift", point=(0.01, -0.02, 0.03))
        t = np.array([0.5, 0.0, -0.25])
        out = transfer_strategy(entry, PointCloud(entry.cloud.points + t))
        np.testing.assert_allclose(out.grasp_point, entry.strategy.grasp_point + t, atol=1e-12)

    def test_degenerate_bbox_rejected(self):
        entry = make_entry("a", "lift")
        flat = entry.cloud.points.copy()
        flat[:, 2] = 0.0  # zero z-extent
        with pytest.raises(DegenerateInputError):
            transfer_strategy(entry, PointCloud(flat))


class TestStrategyValidation:
    def test_quaternion_norm_checked(self):
        with pytest.raises(ValueError, match="unit"):
            GraspStrategy((0, 0, 0), (0.5, 0, 0, 0), np.zeros(8))

    def test_joint_count_checked(self):
        with pytest.raises(ValueError, match="8"):
            GraspStrategy((0, 0, 0), unit_quat(), np.zeros(7))

    def test_entry_requires_known_category(self):
        with pytest.raises(UnknownCategoryError):
            make_entry("x", "fly")

    def test_entry_requires_nonempty_cloud(self):
        with pytest.raises(ValueError, match="nonempty"):
            KnowledgeEntry(
                "x", "lift", PointCloud(np.zeros((0, 3))),
                GraspStrategy((0, 0, 0), unit_quat(), np.zeros(8)),
            )


class TestManifestIO:
    def test_save_load_roundtrip(self, tmp_path):
        kb = KnowledgeBase([make_entry("a"), make_entry("b", "press"), make_entry("c", "wrap_grasp")])
        manifest = tmp_path / "kb" / "manifest.json"
        kb_save(kb, manifest)
        back = kb_load(manifest)
        assert len(back) == 3
        for orig in kb.entries:
            twin = next(e for e in back.entries if e.id == orig.id)
            assert twin.category == orig.category
            np.testing.assert_allclose(twin.cloud.points, orig.cloud.points, atol=1e-12)
            np.testing.assert_array_equal(twin.strategy.joint_angles, orig.strategy.joint_angles)

    def test_missing_cloud_names_entry(self, tmp_path):
        kb = KnowledgeBase([make_entry("lost")])
        manifest = tmp_path / "manifest.json"
        kb_save(kb, manifest)
        (tmp_path / "lost.ply").unlink()
        with pytest.raises(KnowledgeBaseFormatError, match="lost"):
            kb_load(manifest)

    def test_non_unit_quaternion_rejected(self, tmp_path):
        kb = KnowledgeBase([make_entry("q")])
        manifest = tmp_path / "manifest.json"
        kb_save(kb, manifest)
        records = json.loads(manifest.read_text())
        records[0]["grasp"]["quat"] = [0.5, 0.0, 0.0, 0.0]
        manifest.write_text(json.dumps(records))
        with pytest.raises(KnowledgeBaseFormatError, match="unit"):
            kb_load(manifest)

    def test_malformed_manifest(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(KnowledgeBaseFormatError):
            kb_load(path)
        path.write_text('{"a": 1}')
        with pytest.raises(KnowledgeBaseFormatError, match="array"):
            kb_load(path)

    def test_toy_base_structure(self):
        kb = toy_knowledge_base(seed=0, per_category=3)
        assert len(kb) == 12
        for category in CATEGORIES:
            assert len(kb.category_entries(category)) == 3
