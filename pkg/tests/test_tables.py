import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decomp_ips.tables import (
    DenseTable,
    Schema,
    from_counts,
    kl_divergence,
    marginalize,
    normalize,
    table_from_csv,
    table_from_json,
    table_to_csv,
    table_to_json,
)


@st.composite
def tables(draw, max_vars=4, max_levels=3):
    k = draw(st.integers(1, max_vars))
    levels = draw(st.lists(st.integers(1, max_levels), min_size=k, max_size=k))
    schema = Schema.of([(f"v{i}", n) for i, n in enumerate(levels)])
    vals = draw(
        st.lists(st.floats(0, 100, allow_nan=False), min_size=schema.size, max_size=schema.size).filter(
            lambda v: sum(v) > 0
        )
    )
    return DenseTable(schema, vals)


class TestSchema:
    def test_layout_last_variable_fastest(self):
        s = Schema.of({"a": 2, "b": 3})
        assert s.ravel((0, 1)) == 1
        assert s.ravel((1, 0)) == 3
        assert s.unravel(5) == (1, 2)

    @pytest.mark.parametrize(
        "spec",
        [[("a", 2), ("a", 3)], [("", 2)], [("a", 0)]],
    )
    def test_rejects_bad_variables(self, spec):
        with pytest.raises(ValueError):
            Schema.of(spec)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            Schema.uniform([f"x{i}" for i in range(70)], 2)

    def test_unknown_variable(self):
        with pytest.raises(KeyError):
            Schema.of({"a": 2}).axis("b")


class TestFromCounts:
    def test_relative_frequencies(self):
        r = from_counts(Schema.of({"a": 2, "b": 2}), [1, 2, 3, 4])
        np.testing.assert_allclose(r.flat, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
        assert abs(r.total() - 1) <= 1e-14

    def test_equal_counts_uniform(self):
        s = Schema.of({"a": 3, "b": 2, "c": 2})
        np.testing.assert_allclose(from_counts(s, np.full(12, 7)).flat, 1 / 12)

    @pytest.mark.parametrize(
        "counts, msg",
        [([0, 0], "all-zero"), ([1, -1], "negative"), ([1, 2, 3], "length")],
    )
    def test_errors(self, counts, msg):
        with pytest.raises(ValueError, match=msg):
            from_counts(Schema.of({"a": 2}), counts)

    def test_table_is_immutable(self):
        t = from_counts(Schema.of({"a": 2}), [1, 1])
        with pytest.raises(ValueError):
            t.values[0] = 5.0


class TestMarginalize:
    r = from_counts(Schema.of({"a": 2, "b": 2}), [1, 2, 3, 4])

    def test_first_variable(self):
        np.testing.assert_allclose(marginalize(self.r, ["a"]).flat, [0.3, 0.7])

    def test_identity_and_empty(self):
        assert marginalize(self.r, ["a", "b"]).allclose(self.r, atol=0)
        m = marginalize(self.r, [])
        assert m.values.shape == () and m.values == pytest.approx(1.0)

    def test_keeps_schema_order(self):
        assert marginalize(self.r, ["b", "a"]).schema.names == ("a", "b")

    def test_unknown_variable(self):
        with pytest.raises(KeyError):
            marginalize(self.r, ["z"])

    @given(tables(), st.data())
    @settings(max_examples=60, deadline=None)
    def test_commutes_and_conserves_mass(self, t, data):
        names = list(t.schema.names)
        a = data.draw(st.lists(st.sampled_from(names), unique=True))
        b = data.draw(st.lists(st.sampled_from(a), unique=True)) if a else []
        ma = marginalize(t, a)
        np.testing.assert_allclose(marginalize(ma, b).values, marginalize(t, b).values, rtol=1e-14, atol=1e-12)
        assert ma.total() == pytest.approx(t.total(), rel=1e-14)

    @given(tables(max_vars=3), st.data())
    @settings(max_examples=40, deadline=None)
    def test_permutation_equivariance(self, t, data):
        names = list(t.schema.names)
        a = data.draw(st.lists(st.sampled_from(names), unique=True, min_size=1))
        perms = [data.draw(st.permutations(range(n))) for n in t.schema.shape]
        permuted = DenseTable(t.schema, t.values[np.ix_(*perms)])
        expect = marginalize(t, a).values[np.ix_(*[perms[t.schema.axis(n)] for n in marginalize(t, a).schema.names])]
        np.testing.assert_allclose(marginalize(permuted, a).values, expect, rtol=1e-13, atol=1e-12)


class TestKL:
    def test_identity(self):
        p = from_counts(Schema.of({"a": 3}), [1, 2, 3])
        assert kl_divergence(p, p) == 0.0

    def test_known_value(self):
        s = Schema.of({"a": 2})
        # 0.5 ln 2 + 0.5 ln(2/3) = 0.5 ln(4/3)
        assert kl_divergence(DenseTable(s, [0.5, 0.5]), DenseTable(s, [0.25, 0.75])) == pytest.approx(
            0.143841036, abs=1e-6
        )

    def test_support_violation_is_infinite(self):
        s = Schema.of({"a": 2})
        assert kl_divergence(DenseTable(s, [1, 0]), DenseTable(s, [0, 1])) == math.inf

    def test_zero_times_log_zero(self):
        s = Schema.of({"a": 2})
        assert kl_divergence(DenseTable(s, [1, 0]), DenseTable(s, [0.5, 0.5])) == pytest.approx(math.log(2))

    def test_schema_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(DenseTable(Schema.of({"a": 2}), [0.5, 0.5]), DenseTable(Schema.of({"b": 2}), [0.5, 0.5]))

    def test_requires_normalized(self):
        s = Schema.of({"a": 2})
        with pytest.raises(ValueError):
            kl_divergence(DenseTable(s, [1, 1]), DenseTable(s, [0.5, 0.5]))

    @given(
        st.lists(st.floats(0, 10), min_size=2, max_size=8).filter(lambda v: sum(v) > 0),
        st.lists(st.floats(0.01, 10), min_size=8, max_size=8),
    )
    @settings(max_examples=80, deadline=None)
    def test_nonnegative_zero_iff_equal(self, pv, qv):
        s = Schema.of({"a": len(pv)})
        p = normalize(DenseTable(s, pv))
        q = normalize(DenseTable(s, qv[: len(pv)]))
        d = kl_divergence(p, q)
        assert d >= -1e-15
        if np.max(np.abs(p.flat - q.flat)) > 1e-6:
            assert d > 0
        assert abs(kl_divergence(p, p)) <= 1e-15


class TestNormalize:
    def test_examples(self):
        s = Schema.of({"a": 2})
        np.testing.assert_array_equal(normalize(DenseTable(s, [2, 2])).flat, [0.5, 0.5])
        p = DenseTable(s, [0.3, 0.7])
        np.testing.assert_allclose(normalize(p).flat, p.flat, atol=1e-15)
        with pytest.raises(ValueError):
            normalize(DenseTable(s, [0, 0]))

    @given(tables())
    @settings(max_examples=40, deadline=None)
    def test_sums_to_one(self, t):
        assert abs(normalize(t).total() - 1) <= 1e-14


class TestFormats:
    def test_json_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        s = Schema.of({"H": 2, "J": 3, "K": 2})
        t = DenseTable(s, rng.random(s.shape))
        back = table_from_json(table_to_json(t, key="values"))
        np.testing.assert_array_equal(back.values, t.values)
        assert back.schema == s

    def test_json_counts(self):
        text = json.dumps({"variables": [{"name": "H", "levels": 2}], "counts": [1, 3]})
        np.testing.assert_allclose(table_from_json(text).flat, [0.25, 0.75])
        np.testing.assert_array_equal(table_from_json(text, raw=True).flat, [1, 3])

    def test_json_malformed(self):
        with pytest.raises(ValueError):
            table_from_json(json.dumps({"counts": [1]}))

    def test_csv_round_trip(self):
        s = Schema.of({"a": 2, "b": 3})
        t = DenseTable(s, np.arange(6.0))
        text = table_to_csv(t)
        assert text.splitlines()[0] == "a,b,count"
        assert text.splitlines()[2] == "0,1,1"
        back = table_from_csv(text, raw=True)
        np.testing.assert_array_equal(back.values, t.values)

    def test_csv_column_reorder(self):
        text = "b,a,count\n0,0,1\n0,1,2\n1,0,3\n1,1,4\n"
        t = table_from_csv(text, Schema.of({"a": 2, "b": 2}), raw=True)
        np.testing.assert_array_equal(t.values, [[1, 3], [2, 4]])
