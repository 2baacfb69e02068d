import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cdcm import io as cio
from cdcm.errors import InvalidInputError, ParseError
from cdcm.inference import PosteriorDraws
from cdcm.simulate import benchmark_design, simple_model_truth


class TestCSV:
    @given(arrays(np.float64, (5, 3), elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_round_trip_exact(self, a):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "x.csv"
            cio.write_csv(path, a, ["a", "b", "c"])
            names, back = cio.read_csv(path)
        assert names == ["a", "b", "c"]
        assert np.array_equal(back, a)

    def test_line_endings(self, tmp_path):
        cio.write_csv(tmp_path / "x.csv", np.eye(2))
        assert b"\r" not in (tmp_path / "x.csv").read_bytes()

    def test_nonfinite_tokens(self, tmp_path):
        cio.write_csv(tmp_path / "x.csv", [[math.nan, math.inf, -math.inf]])
        assert (tmp_path / "x.csv").read_text() == "nan,inf,-inf\n"

    def test_headerless(self, tmp_path):
        (tmp_path / "x.csv").write_text("1,2\n3,4\n")
        names, data = cio.read_csv(tmp_path / "x.csv")
        assert names is None and np.array_equal(data, [[1, 2], [3, 4]])

    def test_ragged(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n3\n")
        with pytest.raises(ParseError, match=":3:"):
            cio.read_csv(tmp_path / "x.csv")

    def test_non_numeric(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n3,x\n")
        with pytest.raises(ParseError, match="column 2"):
            cio.read_csv(tmp_path / "x.csv")

    def test_empty_and_missing(self, tmp_path):
        (tmp_path / "x.csv").write_text("")
        with pytest.raises(ParseError):
            cio.read_csv(tmp_path / "x.csv")
        with pytest.raises(FileNotFoundError):
            cio.read_csv(tmp_path / "nope.csv")

    def test_header_mismatch(self, tmp_path):
        with pytest.raises(InvalidInputError):
            cio.write_csv(tmp_path / "x.csv", np.eye(2), ["a"])


class TestBold:
    def test_range_warning(self, tmp_path):
        cio.write_csv(tmp_path / "y.csv", [[0.0, 1.0], [5.0, 2.0]], ["r1", "r2"])
        with pytest.warns(cio.RangeWarning):
            Y, names = cio.read_bold_csv(tmp_path / "y.csv")
        assert names == ["r1", "r2"] and Y.shape == (2, 2)

    def test_nonfinite(self, tmp_path):
        (tmp_path / "y.csv").write_text("r1\nnan\n")
        with pytest.raises(ParseError):
            cio.read_bold_csv(tmp_path / "y.csv")


class TestDesignFiles:
    def test_round_trip(self, tmp_path):
        des = benchmark_design(r=0.72, prescan_rest=False)
        cio.write_design(tmp_path / "d.csv", des)
        back = cio.read_design(tmp_path / "d.csv")
        assert np.array_equal(back.U, des.U) and back.r == 0.72 and not back.prescan_rest

    def test_sidecar_missing_tr(self, tmp_path):
        cio.write_design(tmp_path / "d.csv", benchmark_design())
        (tmp_path / "d.json").write_text("{}")
        with pytest.raises(ParseError):
            cio.read_design(tmp_path / "d.csv")


class TestJSON:
    def test_sorted_and_null(self, tmp_path):
        cio.write_json(tmp_path / "x.json", {"b": np.float64(math.nan), "a": np.arange(2)})
        text = (tmp_path / "x.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1], "b": None}

    def test_parse_error_line(self, tmp_path):
        (tmp_path / "x.json").write_text('{\n"a": 1,\n}')
        with pytest.raises(ParseError, match=":3:"):
            cio.read_json(tmp_path / "x.json")

    def test_hypothesis_and_params(self, tmp_path):
        h, p = simple_model_truth()
        cio.write_json(tmp_path / "h.json", h.to_dict())
        cio.write_json(tmp_path / "p.json", p.to_dict())
        h2 = cio.read_hypothesis(tmp_path / "h.json")
        p2 = cio.read_params(tmp_path / "p.json", h2)
        assert np.allclose(p2.to_vector(), p.to_vector())


class TestDraws:
    def test_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((10, 2))
        pd = PosteriorDraws(["a", "b"], x, np.repeat([0, 1], 5), np.ones(2), 0, 0, 0,
                            lp=rng.standard_normal(10))
        cio.write_draws(tmp_path / "d.csv", pd)
        names, draws, chain, lp = cio.read_draws(tmp_path / "d.csv")
        assert names == ["a", "b"]
        assert np.array_equal(draws, x) and np.array_equal(chain, pd.chain)
        assert np.array_equal(lp, pd.lp)
