import json
from collections import Counter, defaultdict

import numpy as np
import pytest

from lstta import toydata
from lstta.toydata import PAD, DataError, DatasetSpec

# 99.73% (three-sigma) quantiles of the chi-square distribution
CHI2_3SIGMA = {3: 14.156, 7: 21.846}


def class_rows(rows, C):
    return [toydata._class_of(r, C) for r in rows]


@pytest.fixture(scope="module")
def corpus():
    spec = DatasetSpec(num_samples=10_000, seed=5)
    return spec, list(toydata.generate(spec))


def chi_square(counts, n, k):
    expected = n / k
    return sum((counts.get(i, 0) - expected) ** 2 / expected for i in range(k))


def test_same_seed_same_bytes(tmp_path):
    spec = DatasetSpec(num_samples=50, seed=2)
    toydata.save(toydata.generate(spec), tmp_path / "a.jsonl")
    toydata.save(toydata.generate(spec), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_samples_depend_only_on_seed_and_index():
    spec = DatasetSpec(num_samples=30, seed=4)
    full = list(toydata.generate(spec))
    assert toydata.make_sample(spec, 17) == full[17]
    tail = list(toydata.generate(DatasetSpec(num_samples=5, seed=4), start=25))
    assert tail == full[25:]


def test_single_timestamp_binary():
    spec = DatasetSpec(num_samples=40, T=1, C=2, seed=1)
    for s in toydata.generate(spec):
        assert s.meta["needle_t"] == 0
        v, a = class_rows(s.visual_ids, 2), class_rows(s.audio_ids, 2)
        assert v == a == [s.label]


def test_every_sample_passes_validator(corpus):
    spec, samples = corpus
    for s in samples[:2000]:
        toydata.validate_needle(s, spec.C)
        v, a = class_rows(s.visual_ids, spec.C), class_rows(s.audio_ids, spec.C)
        t = s.meta["needle_t"]
        assert v[t] == a[t] == s.label == s.meta["class"]
        assert all(v[i] != a[i] for i in range(spec.T) if i != t)


def test_validator_rejects_broken_samples():
    spec = DatasetSpec(num_samples=1)
    s = toydata.make_sample(spec, 0)
    t = s.meta["needle_t"]
    other = (t + 1) % spec.T
    # force a second agreement
    a_cls = class_rows(s.visual_ids, spec.C)[other]
    row = [x for x in s.audio_ids[other]]
    slot = next(i for i, x in enumerate(row) if 1 <= x <= spec.C)
    row[slot] = 1 + a_cls
    s.audio_ids[other] = row
    with pytest.raises(DataError):
        toydata.validate_needle(s, spec.C)


def test_labels_uniform(corpus):
    spec, samples = corpus
    counts = Counter(s.label for s in samples)
    assert chi_square(counts, len(samples), spec.C) < CHI2_3SIGMA[spec.C - 1]


def test_needle_position_uniform(corpus):
    spec, samples = corpus
    counts = Counter(s.meta["needle_t"] for s in samples)
    assert chi_square(counts, len(samples), spec.T) < CHI2_3SIGMA[spec.T - 1]


def test_pooled_histograms_carry_no_label(corpus):
    """Brute-force Bayes classifier on time-pooled class-token histograms, scored in-sample."""
    spec, samples = corpus
    samples = samples[:5000]
    by_key = defaultdict(Counter)
    for s in samples:
        hv = tuple(np.bincount(class_rows(s.visual_ids, spec.C), minlength=spec.C))
        ha = tuple(np.bincount(class_rows(s.audio_ids, spec.C), minlength=spec.C))
        by_key[(hv, ha)][s.label] += 1
    # in-sample majority vote per key upper-bounds what the statistic can achieve
    correct = sum(c.most_common(1)[0][1] for c in by_key.values())
    assert correct / len(samples) <= 1 / spec.C + 0.05


def test_pooled_token_counts_independent_of_label(corpus):
    """Mean pooled count of every class token is the same for every label."""
    spec, samples = corpus
    per_label = defaultdict(list)
    for s in samples[:4000]:
        ids = np.concatenate([np.ravel(s.visual_ids), np.ravel(s.audio_ids)])
        per_label[s.label].append(np.bincount(ids, minlength=spec.vocab)[1:1 + spec.C])
    means = np.array([np.mean(per_label[c], axis=0) for c in range(spec.C)])
    assert np.abs(means - means[0]).max() < 1e-12


def test_noise_ranges_disjoint_and_respected():
    spec = DatasetSpec(num_samples=200, distractor_rate=1.0)
    ranges = {m: toydata.noise_range(spec, m) for m in ("visual", "audio", "language")}
    spans = sorted(ranges.values())
    assert spans[0][0] == 1 + spec.C and spans[-1][1] == spec.vocab
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    for s in toydata.generate(spec):
        for rows, m in ((s.visual_ids, "visual"), (s.audio_ids, "audio")):
            lo, hi = ranges[m]
            flat = [x for r in rows for x in r if x > spec.C]
            assert all(lo <= x < hi for x in flat)
        lo, hi = ranges["language"]
        assert all(lo <= x < hi for x in s.lang_ids)


def test_distractor_rate_controls_padding():
    quiet = toydata.make_sample(DatasetSpec(distractor_rate=0.0), 0)
    for row in quiet.visual_ids:
        assert sorted(row)[:-1] == [PAD] * (len(row) - 1)
    spec = DatasetSpec(num_samples=300, distractor_rate=0.2)
    noise = pad = 0
    for s in toydata.generate(spec):
        flat = np.ravel(s.visual_ids)
        noise += int(np.sum(flat > spec.C))
        pad += int(np.sum(flat == PAD))
    assert abs(noise / (noise + pad) - 0.2) < 0.01


def test_language_query_constant_by_default():
    spec = DatasetSpec(num_samples=20)
    assert len({tuple(s.lang_ids) for s in toydata.generate(spec)}) == 1


def test_queried_attribute_variant():
    spec = DatasetSpec(num_samples=400, queried_attribute=True, seed=3)
    seen = set()
    for s in toydata.generate(spec):
        query = s.lang_ids[0] - 1
        assert query in (toydata.QUERY_CLASS, toydata.QUERY_MIRROR)
        want = s.meta["class"] if query == toydata.QUERY_CLASS else spec.C - 1 - s.meta["class"]
        assert s.label == want
        seen.add(query)
    assert seen == {0, 1}


def test_long_sequences_still_have_one_needle():
    spec = DatasetSpec(num_samples=20, T=40, C=2)
    for s in toydata.generate(spec):
        toydata.validate_needle(s, spec.C)


def test_spec_validation():
    for bad in (DatasetSpec(C=1), DatasetSpec(vocab=6), DatasetSpec(distractor_rate=1.5), DatasetSpec(T=0)):
        with pytest.raises(DataError):
            bad.validate()


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        samples = list(toydata.generate(DatasetSpec(num_samples=100, seed=8)))
        path = tmp_path / "d.jsonl"
        assert toydata.save(samples, path) == 100
        assert toydata.load(path) == samples

    def test_eval_split_without_meta(self, tmp_path):
        samples = list(toydata.generate(DatasetSpec(num_samples=3), with_meta=False))
        toydata.save(samples, tmp_path / "e.jsonl")
        assert "meta" not in (tmp_path / "e.jsonl").read_text()
        assert toydata.load(tmp_path / "e.jsonl") == samples

    def test_truncated_line_named(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [s.to_json() for s in toydata.generate(DatasetSpec(num_samples=3))]
        lines[2] = lines[2][: len(lines[2]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="line 3"):
            toydata.load(path)

    def test_extra_fields_preserved(self, tmp_path):
        s = toydata.make_sample(DatasetSpec(), 0)
        obj = json.loads(s.to_json())
        obj["source"] = {"note": "hand edited"}
        path = tmp_path / "x.jsonl"
        path.write_text(json.dumps(obj) + "\n")
        loaded = toydata.load(path)
        assert loaded[0].extra == {"source": {"note": "hand edited"}}
        toydata.save(loaded, tmp_path / "y.jsonl")
        assert json.loads((tmp_path / "y.jsonl").read_text())["source"] == {"note": "hand edited"}

    @pytest.mark.parametrize("mutate,needle", [
        (lambda o: o.pop("label"), "missing field 'label'"),
        (lambda o: o.update(label=9), "out of range"),
        (lambda o: o.update(visual_ids=o["visual_ids"][:-1]), "visual_ids must have"),
        (lambda o: o["audio_ids"][0].append(3), "unequal lengths"),
        (lambda o: o.update(lang_ids="abc"), "lang_ids"),
    ])
    def test_schema_errors(self, tmp_path, mutate, needle):
        obj = json.loads(toydata.make_sample(DatasetSpec(), 0).to_json())
        mutate(obj)
        path = tmp_path / "s.jsonl"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(DataError, match=needle):
            toydata.load(path, num_classes=4)

    def test_inconsistent_shapes_in_batch(self):
        a = toydata.make_sample(DatasetSpec(), 0)
        b = toydata.make_sample(DatasetSpec(Nv=5), 0)
        with pytest.raises(DataError):
            toydata.to_arrays([a, b])
