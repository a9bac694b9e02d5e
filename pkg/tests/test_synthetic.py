"""合成データ生成のテスト"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ConfigError, ParameterError
from synthetic import (SINE_CHUNK_POINTS, TEST_CHUNKS, TRAIN_CHUNKS, SineChunkSpec,
                       SineDatasetSpec, default_paper_spec, generate_sine_dataset,
                       generate_sine_with_truth, load_truth, save_dataset, spec_from_dict)


@pytest.fixture(scope="module")
def train_dataset():
    return generate_sine_with_truth(default_paper_spec('train'))


class TestDefaultSpec:
    def test_train_and_test_tables(self):
        train = default_paper_spec('train')
        test = default_paper_spec('test')
        assert [(c.amplitude, c.frequency) for c in train.chunks] == list(TRAIN_CHUNKS)
        assert [(c.amplitude, c.frequency) for c in test.chunks] == list(TEST_CHUNKS)
        assert train.total_points == 8 * SINE_CHUNK_POINTS

    def test_full_concatenates(self):
        assert len(default_paper_spec('full').chunks) == 16

    def test_unknown_split(self):
        with pytest.raises(ParameterError):
            default_paper_spec('validation')


class TestGeneration:
    def test_length_and_univariate(self, train_dataset):
        frame = train_dataset.frame
        assert len(frame) == 4000
        assert frame.n_covariates == 0

    def test_samples_follow_chunk_sine(self, train_dataset):
        y = train_dataset.frame.target
        dt = train_dataset.spec.dt
        for truth in train_dataset.truth:
            t = np.arange(truth.start, truth.end) * dt
            expected = truth.amplitude * np.sin(truth.frequency * t + truth.phase)
            assert_allclose(y[truth.start:truth.end], expected, atol=1e-12)

    def test_amplitude_bounds(self, train_dataset):
        y = train_dataset.frame.target
        for truth in train_dataset.truth:
            assert np.max(np.abs(y[truth.start:truth.end])) <= truth.amplitude + 1e-12

    def test_continuity_at_reachable_boundaries(self, train_dataset):
        y = train_dataset.frame.target
        checked = 0
        for truth in train_dataset.truth[1:]:
            if truth.clamped:
                continue
            b = truth.start
            assert abs(y[b] - y[b - 1]) <= 1e-9 * truth.amplitude
            checked += 1
        assert checked >= 1

    def test_clamped_boundaries_record_jump(self, train_dataset):
        y = train_dataset.frame.target
        for truth in train_dataset.truth[1:]:
            if not truth.clamped:
                assert truth.boundary_jump == 0.0
                continue
            b = truth.start
            assert abs(y[b]) == pytest.approx(truth.amplitude)
            assert abs(y[b] - y[b - 1]) == pytest.approx(truth.boundary_jump, abs=1e-9)

    def test_boundary_step_bounded_by_local_slope(self, train_dataset):
        y = train_dataset.frame.target
        dt = train_dataset.spec.dt
        truths = train_dataset.truth
        for prev, truth in zip(truths, truths[1:]):
            if truth.clamped:
                continue
            bound = max(prev.amplitude * prev.frequency, truth.amplitude * truth.frequency) * dt
            assert abs(y[truth.start] - y[truth.start - 1]) <= bound

    def test_deterministic(self):
        spec = default_paper_spec('test', noise_std=0.1, seed=7)
        a = generate_sine_dataset(spec).target
        b = generate_sine_dataset(spec).target
        assert np.array_equal(a, b)

    def test_noise_depends_on_seed(self):
        a = generate_sine_dataset(default_paper_spec('train', noise_std=0.1, seed=1)).target
        b = generate_sine_dataset(default_paper_spec('train', noise_std=0.1, seed=2)).target
        assert not np.array_equal(a, b)

    def test_invalid_chunk(self):
        with pytest.raises(ParameterError):
            SineChunkSpec(amplitude=0.0, frequency=1.0)
        with pytest.raises(ParameterError):
            SineDatasetSpec(chunks=(), dt=0.1)


class TestPersistence:
    def test_save_writes_csv_and_sidecar(self, tmp_path, train_dataset):
        csv_path, sidecar = save_dataset(train_dataset, tmp_path / "sine.csv")
        assert csv_path.exists()
        assert sidecar.name == "sine.truth.json"
        payload = json.loads(sidecar.read_text())
        assert payload['dt'] == train_dataset.spec.dt
        assert len(payload['chunks']) == 8
        truth = load_truth(csv_path)
        assert truth == train_dataset.truth

    def test_load_truth_missing(self, tmp_path):
        assert load_truth(tmp_path / "other.csv") is None


class TestSpecFromDict:
    def test_parses_chunks(self):
        spec = spec_from_dict({'dt': 0.05, 'chunks': [
            {'amplitude': 1.0, 'frequency': 2.0, 'n_points': 100},
            {'amplitude': 3.0, 'frequency': 0.5},
        ]})
        assert spec.dt == 0.05
        assert spec.chunks[1].n_points == SINE_CHUNK_POINTS

    def test_reports_field_path(self):
        with pytest.raises(ConfigError) as info:
            spec_from_dict({'chunks': [{'amplitude': 1.0, 'frequency': 1.0},
                                       {'amplitude': -1.0, 'frequency': 1.0}]})
        assert info.value.field == "chunks[1].amplitude"

    def test_missing_key(self):
        with pytest.raises(ConfigError) as info:
            spec_from_dict({'chunks': [{'amplitude': 1.0}]})
        assert info.value.field == "chunks[0].frequency"
