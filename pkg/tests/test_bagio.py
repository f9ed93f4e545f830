import json
import struct

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from gasmil.bagio import (
    FeatureBag,
    GroupLayout,
    Manifest,
    ManifestEntry,
    SplitSpec,
    SynthConfig,
    decode_bag,
    encode_bag,
    largest_remainder,
    read_bag,
    sample_or_pad,
    stratified_split,
    synth_bags,
    synth_generate,
    write_bag,
)
from gasmil.errors import ConfigError, FormatError, ParameterError
from gasmil.model import GasMil, GasMilConfig
from gasmil.numerics import make_rng


class TestLayout:
    def test_widths_and_slices(self):
        lay = GroupLayout.from_dims([768, 1024])
        assert lay.total_width == 1792
        assert lay.slices() == (slice(0, 768), slice(768, 1792))
        assert lay.subset([1]).dims == (1024,)
        np.testing.assert_array_equal(GroupLayout.from_dims([2, 3]).columns([1]), [2, 3, 4])

    @pytest.mark.parametrize("dims", [[], [0], [3, -1]])
    def test_invalid(self, dims):
        with pytest.raises(ConfigError):
            GroupLayout.from_dims(dims)

    def test_json_round_trip(self):
        lay = GroupLayout(("phikon", "uni"), (768, 1024))
        assert GroupLayout.from_json(json.loads(json.dumps(lay.to_json()))) == lay


class TestCodec:
    def test_one_by_one_zero(self):
        bag = FeatureBag("a", np.zeros((1, 1)), 0)
        out = decode_bag(encode_bag(bag))
        assert out.bag_id == "a" and out.label == 0
        assert out.features.tobytes() == bag.features.tobytes()

    def test_large_bag_bit_exact(self, tmp_path):
        feats = make_rng(0).standard_normal((200, 1792))
        bag = FeatureBag("slide-001", feats, 4)
        write_bag(tmp_path / "b.gmbg", bag)
        out = read_bag(tmp_path / "b.gmbg")
        assert out.features.tobytes() == feats.tobytes()
        assert encode_bag(out) == encode_bag(bag)

    def test_header_layout(self):
        raw = encode_bag(FeatureBag("xy", np.array([[1.5, -2.0]]), 3))
        assert raw[:4] == b"GMBG"
        assert struct.unpack_from("<IIIiH", raw, 4) == (1, 1, 2, 3, 2)
        assert raw[22:24] == b"xy"
        assert struct.unpack_from("<2d", raw, 24) == (1.5, -2.0)

    def test_corrupted_magic(self):
        raw = bytearray(encode_bag(FeatureBag("a", np.ones((2, 2)), 1)))
        raw[0:4] = b"XXXX"
        with pytest.raises(FormatError) as exc:
            decode_bag(bytes(raw))
        assert exc.value.offset == 0

    def test_truncated_payload(self):
        raw = encode_bag(FeatureBag("a", np.ones((3, 2)), 1))
        with pytest.raises(FormatError, match="overflow") as exc:
            decode_bag(raw[:-8])
        assert exc.value.offset == 23

    def test_truncated_header(self):
        with pytest.raises(FormatError):
            decode_bag(b"GMBG\x01\x00")

    def test_trailing_bytes(self):
        raw = encode_bag(FeatureBag("a", np.ones((1, 2)), 1)) + b"\x00"
        with pytest.raises(FormatError, match="trailing"):
            decode_bag(raw)

    def test_nonfinite_rejected_on_write(self):
        with pytest.raises(ParameterError):
            encode_bag(FeatureBag("a", np.array([[np.nan]]), 0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 10), st.integers(0, 100), st.text(max_size=20))
    def test_round_trip_property(self, n, m, label, ident):
        feats = make_rng(n * 31 + m).standard_normal((n, m)) * 1e3
        bag = FeatureBag(ident, feats, label)
        out = decode_bag(encode_bag(bag))
        assert (out.bag_id, out.label) == (ident, label)
        assert out.features.tobytes() == feats.tobytes()


class TestSampleOrPad:
    def bag(self, n, m=3):
        return FeatureBag("b", np.arange(n * m, dtype=float).reshape(n, m) + 1, 0)

    def test_identity(self, rng):
        b = self.bag(200)
        np.testing.assert_array_equal(sample_or_pad(b, 200, rng).features, b.features)

    def test_zero_pad(self):
        b = self.bag(150)
        out = sample_or_pad(b, 200)
        np.testing.assert_array_equal(out.features[:150], b.features)
        assert not out.features[150:].any()

    def test_subsample_distinct_rows(self, rng):
        b = self.bag(300)
        out = sample_or_pad(b, 200, rng).features
        assert len({tuple(r) for r in out}) == 200
        assert {tuple(r) for r in out} <= {tuple(r) for r in b.features}

    def test_selection_frequency(self):
        # each row should be kept with probability 200/300
        b = FeatureBag("b", np.arange(300, dtype=float)[:, None], 0)
        counts = np.zeros(300)
        for seed in range(10_000):
            kept = sample_or_pad(b, 200, make_rng(seed)).features[:, 0].astype(int)
            counts[kept] += 1
        freq = counts / 10_000
        assert np.all(np.abs(freq - 200 / 300) <= 0.02)

    @given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 5))
    def test_shape_law(self, n, target, m):
        out = sample_or_pad(FeatureBag("b", np.ones((n, m)), 0), target, make_rng(n))
        assert out.features.shape == (target, m)

    def test_padding_does_not_depend_on_padding_order(self, rng):
        # zero rows form a multiset with the real rows: permuting them leaves scores unchanged
        lay = GroupLayout.from_dims([3, 4])
        model = GasMil(GasMilConfig(lay, 3, s=2, mlp_hidden=6, head_hidden=5))
        params = model.init_params(rng)
        b = FeatureBag("b", rng.standard_normal((7, 7)), 0, lay)
        padded = sample_or_pad(b, 12).features
        perm = rng.permutation(12)
        s1 = model.forward(padded, params)[0]
        s2 = model.forward(padded[perm], params)[0]
        again = sample_or_pad(FeatureBag("b", padded[:7], 0, lay), 12).features
        np.testing.assert_allclose(s1, s2, atol=1e-12)
        np.testing.assert_array_equal(model.forward(again, params)[0], s1)


def make_manifest(counts):
    entries = []
    for label, count in enumerate(counts):
        entries += [ManifestEntry(f"c{label}-{i:05d}", f"bags/{label}-{i}.gmbg", label) for i in range(count)]
    return Manifest(GroupLayout.from_dims([2]), len(counts), entries)


class TestSplit:
    def test_largest_remainder(self):
        assert largest_remainder(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
        assert largest_remainder(3, (1 / 3, 1 / 3, 1 / 3)) == [1, 1, 1]
        assert largest_remainder(2, (0.5, 0.25, 0.25)) == [1, 1, 0]

    def test_single_class_ten(self):
        out = stratified_split(make_manifest([10]), SplitSpec(0.8, 0.1, 0.1))
        assert [len(out.split(t)) for t in ("train", "val", "test")] == [8, 1, 1]

    def test_panda_sizes(self):
        counts = [2500, 2300, 1150, 1060, 1070, 1048]
        total = sum(counts)
        assert total == 9128
        spec = SplitSpec(5392 / total, 1933 / total, 1803 / total, seed=3)
        out = stratified_split(make_manifest(counts), spec)
        sizes = [len(out.split(t)) for t in ("train", "val", "test")]
        for got, want in zip(sizes, (5392, 1933, 1803)):
            assert abs(got - want) <= len(counts)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(0, 1000))
    @example([1, 1, 1, 17], 0)
    def test_per_class_counts(self, counts, seed):
        spec = SplitSpec(0.6, 0.25, 0.15, seed=seed)
        out = stratified_split(make_manifest(counts), spec)
        assert sorted(e.id for e in out.entries) == sorted(e.id for e in make_manifest(counts).entries)
        assert all(e.split in ("train", "val", "test") for e in out.entries)
        for label, count in enumerate(counts):
            members = [e for e in out.entries if e.label == label]
            got = [sum(e.split == tag for e in members) for tag in ("train", "val", "test")]
            assert got == largest_remainder(count, spec.fractions)
            for n_tag, frac in zip(got, spec.fractions):
                assert abs(n_tag - frac * count) < 1.0 + 1e-9

    def test_deterministic_and_seed_dependent(self):
        m = make_manifest([30, 30])
        a = [e.split for e in stratified_split(m, SplitSpec(seed=1)).entries]
        b = [e.split for e in stratified_split(m, SplitSpec(seed=1)).entries]
        c = [e.split for e in stratified_split(m, SplitSpec(seed=2)).entries]
        assert a == b and a != c

    def test_empty(self):
        with pytest.raises(ParameterError):
            stratified_split(Manifest(GroupLayout.from_dims([2]), 3, []), SplitSpec())

    def test_bad_fractions(self):
        with pytest.raises(ParameterError):
            SplitSpec(0.5, 0.5, 0.5)


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = stratified_split(make_manifest([3, 4]), SplitSpec(seed=0))
        m.save(tmp_path / "manifest.json")
        back = Manifest.load(tmp_path / "manifest.json")
        assert back.to_json() == m.to_json()
        assert set(json.loads((tmp_path / "manifest.json").read_text())) == {"layout", "num_classes", "entries"}

    def test_invariants(self):
        with pytest.raises(ConfigError, match="duplicate"):
            Manifest(GroupLayout.from_dims([1]), 2, [ManifestEntry("a", "x", 0), ManifestEntry("a", "y", 1)])
        with pytest.raises(ConfigError):
            Manifest(GroupLayout.from_dims([1]), 2, [ManifestEntry("a", "x", 2)])


class TestSynth:
    def test_block_mean_oracle(self):
        lay = GroupLayout.from_dims([16, 24])
        bags = synth_bags(lay, 300, 50, 3, [(0, 1), (2,)], make_rng(11))
        block2 = lay.slices()[1]
        cls2 = [b.features[:, block2].mean() for b in bags if b.label == 2]
        cls0 = [b.features[:, block2].mean() for b in bags if b.label == 0]
        # signal fraction ~ U(0.1, 0.3) -> mean shift 2.0 * 0.2; sd over bags ~ sqrt((2 * 0.2 / sqrt 12)^2 + 1/(50*24))
        sd = np.sqrt((2.0 * 0.2 / np.sqrt(12)) ** 2 + 1.0 / (50 * 24))
        assert abs(np.mean(cls2) - 0.4) <= 3 * sd / np.sqrt(len(cls2))
        assert abs(np.mean(cls0)) <= 3 * np.sqrt(1.0 / (50 * 24)) / np.sqrt(len(cls0))

    def test_class_chunks_within_group(self):
        lay = GroupLayout.from_dims([8])
        bags = synth_bags(lay, 60, 40, 2, [(0, 1)], make_rng(2), SynthConfig(signal_fraction=(0.5, 0.5)))
        for b in bags:
            first, second = b.features[:, :4].mean(), b.features[:, 4:].mean()
            assert (first > second) == (b.label == 0)

    def test_labels_balanced(self):
        bags = synth_bags(GroupLayout.from_dims([4, 4]), 31, 5, 3, None, make_rng(0))
        assert sorted(np.bincount([b.label for b in bags]).tolist()) == [10, 10, 11]

    def test_single_class(self, tmp_path):
        m = synth_generate(tmp_path, GroupLayout.from_dims([3]), 5, 4, 1, None, make_rng(0))
        assert all(e.label == 0 for e in m.entries)
        for e in m.entries:
            assert m.load_bag(e).features.shape == (4, 3)

    def test_uncovered_class(self):
        with pytest.raises(ParameterError):
            synth_bags(GroupLayout.from_dims([4, 4]), 10, 5, 3, [(0,), (1,)], make_rng(0))

    def test_ordinal_amplitude(self):
        lay = GroupLayout.from_dims([6, 6])
        bags = synth_bags(lay, 600, 40, 6, None, make_rng(4), SynthConfig(ordinal=True))
        means = [np.mean([b.features.mean() for b in bags if b.label == g]) for g in range(6)]
        assert np.all(np.diff(means) > 0)
        assert abs(means[0]) < 0.03

    def test_deterministic_files(self, tmp_path):
        lay = GroupLayout.from_dims([16, 24])
        synth_generate(tmp_path / "a", lay, 20, 10, 3, None, make_rng(7), split=SplitSpec(seed=7))
        synth_generate(tmp_path / "b", lay, 20, 10, 3, None, make_rng(7), split=SplitSpec(seed=7))
        for f in sorted((tmp_path / "a" / "bags").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "bags" / f.name).read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
