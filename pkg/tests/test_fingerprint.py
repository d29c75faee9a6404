import itertools

import numpy as np
import pytest

from hybridflow.fingerprint import (CAR_LIKE, TRUCK_LIKE, FeatureRecord,
                                    FingerprintTrace, class_shares, evaluate,
                                    extract_features, generate_corpus, link_heights,
                                    split_corpus, synthesize_trace, train)


def flat_trace(level=-50.0, n=80):
    return FingerprintTrace(rssi_dbm=np.full((9, n), level), sample_rate_hz=10.0,
                            label=CAR_LIKE, speed_mps=20.0, dip_width_s=0.0, seed=0)


class TestSynthesize:
    def test_dip_width_is_length_over_speed(self):
        trace = synthesize_trace(CAR_LIKE, 20.0, 0.0, seed=1)
        assert trace.dip_width_s == pytest.approx(4.5 / 20.0)  # 0.225 s, every link

    def test_truck_attenuates_top_links_deeper(self):
        car = synthesize_trace(CAR_LIKE, 20.0, 0.0, seed=1)
        truck = synthesize_trace(TRUCK_LIKE, 20.0, 0.0, seed=1)
        heights = link_heights()
        for k in range(9):
            if heights[k] >= 1.25:  # links involving the top sensor row
                car_min = car.rssi_dbm[k].min() - car.rssi_dbm[k, 0]
                truck_min = truck.rssi_dbm[k].min() - truck.rssi_dbm[k, 0]
                assert truck_min < car_min

    def test_deterministic_under_seed(self):
        a = synthesize_trace(CAR_LIKE, 23.0, 2.0, seed=99)
        b = synthesize_trace(CAR_LIKE, 23.0, 2.0, seed=99)
        assert np.array_equal(a.rssi_dbm, b.rssi_dbm)
        c = synthesize_trace(CAR_LIKE, 23.0, 2.0, seed=100)
        assert not np.array_equal(a.rssi_dbm, c.rssi_dbm)


class TestExtractFeatures:
    def test_flat_trace_all_zero(self):
        feats = extract_features(flat_trace())
        assert np.allclose(feats.values, 0.0)

    def test_rectangular_dip_closed_form(self):
        # 6 dB for exactly 1 s at 10 Hz -> depth 6, width 1.0, area 6.0
        rssi = np.full((9, 80), -50.0)
        rssi[:, 40:50] = -56.0
        trace = FingerprintTrace(rssi_dbm=rssi, sample_rate_hz=10.0, label=CAR_LIKE,
                                 speed_mps=20.0, dip_width_s=1.0, seed=0)
        feats = extract_features(trace, threshold_db=3.0)
        for k in range(9):
            depth, mean, width, area = feats.values[4 * k: 4 * k + 4]
            assert depth == pytest.approx(6.0)
            assert width == pytest.approx(1.0)
            assert area == pytest.approx(6.0)

    def test_matches_independent_reimplementation(self):
        # plain-python second pass over the same definition
        trace = synthesize_trace(CAR_LIKE, 24.0, 1.5, seed=7)
        feats = extract_features(trace, threshold_db=3.0)
        n = trace.rssi_dbm.shape[1]
        head = n // 10
        dt = 0.1
        for k in range(9):
            series = [float(v) for v in trace.rssi_dbm[k]]
            baseline = sum(series[:head]) / head
            atten = [baseline - v for v in series]
            depth = max(max(atten), 0.0)
            mean = sum(atten) / n
            below = [a for a in atten if a >= 3.0]
            width = len(below) * dt
            area = sum(below) * dt
            got = feats.values[4 * k: 4 * k + 4]
            assert got[0] == pytest.approx(depth, abs=1e-9)
            assert got[1] == pytest.approx(mean, abs=1e-9)
            assert got[2] == pytest.approx(width, abs=1e-9)
            assert got[3] == pytest.approx(area, abs=1e-9)

    def test_translation_invariance(self):
        trace = synthesize_trace(TRUCK_LIKE, 18.0, 2.0, seed=3)
        shifted = FingerprintTrace(rssi_dbm=trace.rssi_dbm + 7.5,
                                   sample_rate_hz=10.0, label=TRUCK_LIKE,
                                   speed_mps=18.0, dip_width_s=trace.dip_width_s, seed=3)
        a = extract_features(trace).values
        b = extract_features(shifted).values
        assert np.allclose(a, b, atol=1e-9)

    def test_too_short_trace_rejected(self):
        from hybridflow.fingerprint import FingerprintError
        with pytest.raises(FingerprintError):
            extract_features(flat_trace(n=8))


def toy_separable_dataset():
    """2-feature toy set; separability is oracle-verified below."""
    pts_pos = [(2.0, 2.0), (3.0, 2.5), (2.5, 3.5), (4.0, 3.0)]
    pts_neg = [(-2.0, -1.0), (-3.0, -2.0), (-2.5, -2.5), (-1.5, -3.0)]
    records = []
    for x, y in pts_pos:
        records.append(FeatureRecord(values=np.array([x, y]), label=CAR_LIKE))
    for x, y in pts_neg:
        records.append(FeatureRecord(values=np.array([x, y]), label=TRUCK_LIKE))
    return records


def test_toy_set_is_linearly_separable_oracle():
    # exhaustive search over line angles/offsets confirms a separating line
    records = toy_separable_dataset()
    found = False
    for theta in np.linspace(0, np.pi, 360):
        w = np.array([np.cos(theta), np.sin(theta)])
        proj = {label: [] for label in (CAR_LIKE, TRUCK_LIKE)}
        for r in records:
            proj[r.label].append(float(w @ r.values))
        if min(proj[CAR_LIKE]) > max(proj[TRUCK_LIKE]) or \
           min(proj[TRUCK_LIKE]) > max(proj[CAR_LIKE]):
            found = True
            break
    assert found


class TestTrain:
    def test_separable_toy_set_perfect_training_accuracy(self):
        records = toy_separable_dataset()
        for reg in ("l1", "l2"):
            model = train(records, reg=reg, lam=1e-4, epochs=400, seed=1)
            assert evaluate(model, records).accuracy == 1.0

    def test_huge_l1_penalty_zeroes_weights(self):
        records = toy_separable_dataset() + [
            FeatureRecord(values=np.array([1.0, 1.0]), label=CAR_LIKE),
            FeatureRecord(values=np.array([1.2, 0.8]), label=CAR_LIKE),
        ]
        model = train(records, reg="l1", lam=100.0, epochs=200, seed=1)
        assert np.allclose(model.weights, 0.0)
        cm = evaluate(model, records)
        majority = max(6, 4) / 10
        assert cm.accuracy == pytest.approx(majority)

    def test_deterministic_weights(self):
        records = toy_separable_dataset()
        a = train(records, reg="l2", lam=1e-3, epochs=100, seed=5)
        b = train(records, reg="l2", lam=1e-3, epochs=100, seed=5)
        assert np.array_equal(a.weights, b.weights) and a.bias == b.bias

    def test_single_class_rejected(self):
        from hybridflow.fingerprint import FingerprintError
        records = [FeatureRecord(values=np.array([1.0, 2.0]), label=CAR_LIKE)] * 4
        with pytest.raises(FingerprintError):
            train(records, reg="l2")

    def test_objective_never_worse_than_first_epoch(self):
        corpus = generate_corpus(120, 2.0, 0.5, seed=31)
        records = [extract_features(t) for t in corpus]
        for reg in ("l1", "l2"):
            model = train(records, reg=reg, lam=1e-3, epochs=150, seed=2)
            assert model.objective_curve[-1] <= model.objective_curve[0] + 1e-12

    def test_scaling_invariance_of_decisions(self):
        corpus = generate_corpus(80, 2.0, 0.5, seed=17)
        records = [extract_features(t) for t in corpus]
        model = train(records, reg="l2", lam=1e-3, epochs=200, seed=3)
        scaled = [FeatureRecord(values=r.values * 3.0, label=r.label) for r in records]
        model_s = train(scaled, reg="l2", lam=1e-3, epochs=200, seed=3)
        preds = [model.predict(r) for r in records]
        preds_s = [model_s.predict(r) for r in scaled]
        assert preds == preds_s


class TestEvaluate:
    def test_always_car_model(self):
        records = ([FeatureRecord(values=np.zeros(2), label=CAR_LIKE)] * 6 +
                   [FeatureRecord(values=np.zeros(2), label=TRUCK_LIKE)] * 4)
        model = train(toy_separable_dataset(), reg="l2", lam=1e-3, epochs=50, seed=1)
        model.weights = np.zeros(2)
        model.bias = 1.0
        cm = evaluate(model, records)
        assert cm.accuracy == pytest.approx(0.6)
        assert (cm.cc, cm.ct, cm.tc, cm.tt) == (6, 0, 4, 0)

    def test_perfect_model_identity_confusion(self):
        records = toy_separable_dataset()
        model = train(records, reg="l2", lam=1e-4, epochs=400, seed=1)
        cm = evaluate(model, records)
        assert cm.ct == 0 and cm.tc == 0
        assert cm.cc == 4 and cm.tt == 4


class TestClassShares:
    def model(self):
        corpus = generate_corpus(300, 2.0, 0.5, seed=41)
        return train([extract_features(t) for t in corpus], reg="l2", lam=1e-3,
                     epochs=200, seed=4)

    def test_all_car_stream(self):
        model = self.model()
        stream = [synthesize_trace(CAR_LIKE, 20.0 + i, 0.0, seed=i) for i in range(10)]
        shares = class_shares(stream, model)
        assert shares == {CAR_LIKE: 1.0, TRUCK_LIKE: 0.0}

    def test_alternating_stream(self):
        model = self.model()
        stream = list(itertools.chain.from_iterable(
            (synthesize_trace(CAR_LIKE, 20.0, 0.0, seed=i),
             synthesize_trace(TRUCK_LIKE, 20.0, 0.0, seed=i + 1000))
            for i in range(5)))
        shares = class_shares(stream, model)
        assert shares == {CAR_LIKE: 0.5, TRUCK_LIKE: 0.5}

    def test_mixed_stream_matches_generation_ratio(self):
        model = self.model()
        stream = generate_corpus(400, 2.0, 0.7, seed=77)
        true_car = sum(1 for t in stream if t.label == CAR_LIKE) / len(stream)
        shares = class_shares(stream, model)
        assert abs(shares[CAR_LIKE] - true_car) <= 0.05


def test_mini_corpus_pipeline_accuracy():
    corpus = generate_corpus(400, 2.0, 0.5, seed=8)
    train_set, holdout = split_corpus(corpus, 0.2, seed=8)
    records = [extract_features(t) for t in train_set]
    held = [extract_features(t) for t in holdout]
    for reg in ("l1", "l2"):
        model = train(records, reg=reg, lam=1e-3, epochs=250, seed=8)
        assert evaluate(model, held).accuracy >= 0.95


def test_full_pipeline_determinism():
    outs = []
    for _ in range(2):
        corpus = generate_corpus(100, 2.0, 0.5, seed=55)
        train_set, holdout = split_corpus(corpus, 0.2, seed=55)
        model = train([extract_features(t) for t in train_set], reg="l2",
                      lam=1e-3, epochs=100, seed=55)
        cm = evaluate(model, [extract_features(t) for t in holdout])
        outs.append((tuple(model.weights), model.bias, cm.to_dict()))
    assert outs[0] == outs[1]
