"""Tests for confidence-weighted thing-class probabilities."""
import numpy as np
import pytest

from services.instance_registry import (InstanceRegistry, integrate_thing_probabilities,
                                        restore_thing_class)
from services.panoptic_frontend import Detection, SegmentationFrame
from utils.errors import InputError, RegistryError

from tests.conftest import BALL, CRATE

CHAIR, TABLE = BALL, CRATE


def _frame(detections):
    ids = [d.instance_id for d in detections]
    instance_map = np.array([ids], dtype=np.int64)
    return SegmentationFrame(np.full(instance_map.shape, CHAIR), instance_map, detections)


class TestIntegrateThingProbabilities:

    def test_single_detection(self):
        registry = InstanceRegistry()
        integrate_thing_probabilities(registry, {1: 5}, _frame([Detection(1, 0.8, {CHAIR: 1.0})]))
        assert registry.distribution(5) == {CHAIR: pytest.approx(1.0)}

    def test_equal_confidences(self):
        registry = InstanceRegistry()
        integrate_thing_probabilities(registry, {1: 5}, _frame([Detection(1, 0.5, {CHAIR: 1.0})]))
        integrate_thing_probabilities(registry, {3: 5}, _frame([Detection(3, 0.5, {TABLE: 1.0})]))
        dist = registry.distribution(5)
        assert dist[CHAIR] == pytest.approx(0.5)
        assert dist[TABLE] == pytest.approx(0.5)

    def test_confidence_weighting(self):
        registry = InstanceRegistry()
        integrate_thing_probabilities(registry, {1: 2}, _frame([Detection(1, 0.9, {CHAIR: 1.0})]))
        integrate_thing_probabilities(registry, {1: 2}, _frame([Detection(1, 0.1, {TABLE: 1.0})]))
        assert registry.distribution(2) == {CHAIR: pytest.approx(0.9), TABLE: pytest.approx(0.1)}
        assert registry.records[2].observations == 2

    def test_unknown_instance_is_created(self):
        registry = InstanceRegistry()
        assert 9 not in registry
        integrate_thing_probabilities(registry, {1: 9}, _frame([Detection(1, 0.3, {CHAIR: 1.0})]))
        assert 9 in registry
        assert len(registry) == 1

    def test_missing_detection(self):
        registry = InstanceRegistry()
        with pytest.raises(InputError):
            integrate_thing_probabilities(registry, {2: 9}, _frame([Detection(1, 0.3, {CHAIR: 1.0})]))

    def test_replay_oracle(self):
        rng = np.random.default_rng(11)
        registry = InstanceRegistry()
        log = []
        for _ in range(10):
            confidence = float(rng.uniform(0.05, 1.0))
            p = float(rng.uniform())
            log.append((confidence, {CHAIR: p, TABLE: 1.0 - p}))
            integrate_thing_probabilities(registry, {1: 4}, _frame([Detection(1, confidence, log[-1][1])]))
        total = sum(c for c, _ in log)
        for class_id in (CHAIR, TABLE):
            expected = sum(c * dist[class_id] for c, dist in log) / total
            assert registry.distribution(4)[class_id] == pytest.approx(expected, abs=1e-12)
        assert sum(registry.distribution(4).values()) == pytest.approx(1.0, abs=1e-6)


class TestRestoreThingClass:

    def test_argmax(self):
        registry = InstanceRegistry()
        registry.add_observation(3, 0.9, {CHAIR: 1.0})
        registry.add_observation(3, 0.1, {TABLE: 1.0})
        class_id, probability = restore_thing_class(registry, 3)
        assert class_id == CHAIR
        assert probability == pytest.approx(0.9)

    def test_uniform_picks_lowest_class(self):
        registry = InstanceRegistry()
        registry.add_observation(3, 1.0, {TABLE: 0.5, CHAIR: 0.5})
        assert restore_thing_class(registry, 3)[0] == min(CHAIR, TABLE)

    def test_unseen_instance(self):
        with pytest.raises(RegistryError):
            restore_thing_class(InstanceRegistry(), 1)
        with pytest.raises(RegistryError):
            InstanceRegistry().distribution(1)

    def test_zero_confidence(self):
        registry = InstanceRegistry()
        registry.add_observation(3, 0.0, {CHAIR: 1.0})
        with pytest.raises(RegistryError):
            restore_thing_class(registry, 3)


class TestSerialization:

    def test_dict_round_trip(self):
        registry = InstanceRegistry()
        registry.add_observation(2, 0.7, {CHAIR: 0.25, TABLE: 0.75})
        registry.add_observation(8, 0.4, {TABLE: 1.0})
        restored = InstanceRegistry.from_dict(registry.to_dict())
        assert restored.instance_ids() == [2, 8]
        assert restored.distribution(2) == registry.distribution(2)
        assert restored.records[8].observations == 1
