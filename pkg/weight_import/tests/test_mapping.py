import numpy as np
import pytest

from weight_import.mapping import (
    MapEntry,
    MappingError,
    apply_rule,
    parse_mapping,
    rule_shape,
    suggest_mapping,
    write_mapping,
)


class TestRules:
    def test_conv_kernel_axis_order(self):
        # fixture kernel with all-distinct entries, checked elementwise
        src = np.arange(3 * 3 * 2 * 4, dtype=np.float32).reshape(3, 3, 2, 4)
        out = apply_rule(src, "conv_kernel")
        assert out.shape == (4, 2, 3, 3)
        for kh in range(3):
            for kw in range(3):
                for ci in range(2):
                    for co in range(4):
                        assert out[co, ci, kh, kw] == src[kh, kw, ci, co]

    def test_tconv_kernel_axis_order(self):
        src = np.arange(2 * 2 * 3 * 5, dtype=np.float32).reshape(2, 2, 3, 5)
        out = apply_rule(src, "tconv_kernel")
        assert out.shape == (3, 5, 2, 2)
        assert out[1, 4, 0, 1] == src[0, 1, 1, 4]

    def test_conv3d_kernel_squeeze(self):
        src = np.arange(21 * 7, dtype=np.float32).reshape(1, 1, 1, 21, 7)
        out = apply_rule(src, "conv3d_kernel")
        assert out.shape == (7, 21)
        assert out[3, 20] == src[0, 0, 0, 20, 3]

    def test_none_passthrough(self):
        src = np.arange(5.0)
        assert np.array_equal(apply_rule(src, "none"), src)

    def test_rule_shape_consistency(self):
        for shape, rule in [
            ((3, 3, 2, 4), "conv_kernel"),
            ((2, 2, 3, 5), "tconv_kernel"),
            ((1, 1, 1, 21, 7), "conv3d_kernel"),
            ((6,), "none"),
        ]:
            arr = np.zeros(shape, np.float32)
            assert apply_rule(arr, rule).shape == rule_shape(shape, rule)

    def test_bad_rank_rejected(self):
        with pytest.raises(MappingError):
            apply_rule(np.zeros((3, 3)), "conv_kernel")


class TestMappingFile:
    def test_round_trip(self, tmp_path):
        entries = [
            MapEntry("layers/a/kernel", "enc0.conv1.W", "conv_kernel"),
            MapEntry("layers/a/bias", "enc0.conv1.b", "none"),
        ]
        path = tmp_path / "map.tsv"
        write_mapping(path, entries)
        assert parse_mapping(path) == entries

    def test_duplicate_target_rejected(self, tmp_path):
        path = tmp_path / "map.tsv"
        path.write_text("a\tenc0.conv1.W\tconv_kernel\nb\tenc0.conv1.W\tnone\n")
        with pytest.raises(MappingError, match="two sources"):
            parse_mapping(path)

    def test_unknown_rule_rejected(self, tmp_path):
        path = tmp_path / "map.tsv"
        path.write_text("a\tenc0.conv1.W\tflip\n")
        with pytest.raises(MappingError, match="rule"):
            parse_mapping(path)


class TestSuggest:
    def test_orders_and_shapes(self):
        source = {
            "m/c1/bias": np.zeros(4, np.float32),
            "m/c1/kernel": np.zeros((3, 3, 1, 4), np.float32),
            "m/head/bias": np.zeros(2, np.float32),
            "m/head/kernel": np.zeros((1, 1, 7, 2), np.float32),
        }
        manifest = [
            ("enc0.conv1.W", (4, 1, 3, 3)),
            ("enc0.conv1.b", (4,)),
            ("head.W", (2, 7, 1, 1)),
            ("head.b", (2,)),
        ]
        entries = suggest_mapping(source, manifest)
        got = {e.source: (e.target, e.rule) for e in entries}
        assert got["m/c1/kernel"] == ("enc0.conv1.W", "conv_kernel")
        assert got["m/c1/bias"] == ("enc0.conv1.b", "none")
        assert got["m/head/kernel"] == ("head.W", "conv_kernel")
