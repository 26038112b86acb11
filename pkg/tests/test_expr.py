"""Expression grammar: precedence, associativity, spans, and error reporting."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bspde import EvalError, ParseError
from bspde.expr import compile_expression, evaluate, parse_expression, variables_in


def ev(text, **env):
    node = parse_expression(text, variables=set(env) or None)
    return evaluate(node, env)


class TestPrecedence:
    def test_mul_over_add(self):
        assert ev("2 + 3 * 4") == 14.0

    def test_pow_over_mul(self):
        assert ev("2 * 3 ^ 2") == 18.0

    def test_unary_minus_binds_looser_than_pow(self):
        assert ev("-2^2") == -4.0

    def test_pow_left_associative(self):
        # every level is left-associative here, including ^
        assert ev("2 ^ 3 ^ 2") == 64.0

    def test_negative_exponent_literal(self):
        assert ev("2 ^ -3") == 0.125

    def test_div_left_associative(self):
        assert ev("6 / 3 / 2") == 1.0

    def test_sub_left_associative(self):
        assert ev("8 - 3 - 2") == 3.0

    def test_parens_override(self):
        assert ev("2 * (3 + 4)") == 14.0
        assert ev("(2 ^ 3) ^ 2") == 64.0

    def test_unicode_minus(self):
        assert ev("5 − 2") == 3.0
        assert ev("−4") == -4.0


class TestFunctions:
    def test_unary_functions(self):
        assert ev("sin(0)") == 0.0
        assert math.isclose(ev("cos(0)"), 1.0)
        assert math.isclose(ev("exp(1)"), math.e)
        assert ev("abs(-3)") == 3.0
        assert ev("relu(-2)") == 0.0
        assert ev("relu(2)") == 2.0

    def test_binary_min_max(self):
        assert ev("min(2, 5)") == 2.0
        assert ev("max(2, 5)") == 5.0

    def test_nested_calls(self):
        assert math.isclose(ev("max(sin(1), cos(1))"), math.sin(1.0))
        assert math.isclose(ev("min(1 + 2, 2 * 3)"), 3.0)

    def test_function_names_reserved(self):
        # function tokens never act as variables, even if declared
        with pytest.raises(ParseError):
            parse_expression("sin + 1", variables={"sin"})


class TestVariables:
    def test_variable_evaluation(self):
        assert ev("x1 * 2 + t", x1=3.0, t=0.5) == 6.5

    def test_variables_in(self):
        node = parse_expression("x1 + sin(w1 * t)", variables={"x1", "w1", "t"})
        assert variables_in(node) == {"x1", "w1", "t"}

    def test_variables_in_constant(self):
        assert variables_in(parse_expression("1 + 2")) == set()

    def test_compile_expression(self):
        ast, fn = compile_expression("x1 ^ 2 + 1", variables={"x1"})
        assert fn({"x1": 3.0}) == 10.0
        assert variables_in(ast) == {"x1"}


class TestParseErrors:
    def test_empty(self):
        with pytest.raises(ParseError) as exc:
            parse_expression("")
        assert exc.value.line == 1 and exc.value.column == 1
        assert "empty expression" in str(exc.value)

    def test_dangling_operator(self):
        with pytest.raises(ParseError):
            parse_expression("2 +")

    def test_function_requires_parens(self):
        with pytest.raises(ParseError) as exc:
            parse_expression("sin 3")
        assert "expected '('" in str(exc.value)

    def test_unknown_identifier(self):
        with pytest.raises(ParseError) as exc:
            parse_expression("y9 + 1", variables={"x1"})
        assert "unknown identifier 'y9'" in str(exc.value)

    def test_trailing_tokens(self):
        with pytest.raises(ParseError) as exc:
            parse_expression("1 2")
        assert "after expression" in str(exc.value)

    def test_unbalanced_paren(self):
        with pytest.raises(ParseError):
            parse_expression("(1 + 2")

    def test_error_carries_position(self):
        with pytest.raises(ParseError) as exc:
            parse_expression("1 + @")
        assert exc.value.line == 1
        assert exc.value.column == 5


class TestEvalErrors:
    def test_unbound_variable(self):
        node = parse_expression("x1 + 1", variables={"x1"})
        with pytest.raises(EvalError):
            evaluate(node, {})

    def test_division_by_zero(self):
        with pytest.raises(EvalError):
            ev("1 / 0")

    def test_nonfinite_power(self):
        with pytest.raises(EvalError):
            ev("0 ^ -1")
        with pytest.raises(EvalError):
            ev("(-2) ^ 0.5")

    def test_eval_error_has_span(self):
        node = parse_expression("1 + 1 / 0")
        with pytest.raises(EvalError) as exc:
            evaluate(node, {})
        # span points at the offending subexpression, not the whole input
        assert exc.value.span == (4, 9)
        assert "columns" in str(exc.value)


@given(
    st.integers(min_value=-9, max_value=9),
    st.integers(min_value=-9, max_value=9),
    st.integers(min_value=-9, max_value=9),
)
def test_add_mul_precedence_property(a, b, c):
    assert ev(f"{a} + {b} * {c}") == a + b * c
    assert ev(f"({a} + {b}) * {c}") == (a + b) * c


@given(
    st.integers(min_value=-20, max_value=20),
    st.integers(min_value=1, max_value=20),
    st.integers(min_value=1, max_value=20),
)
def test_left_assoc_property(a, b, c):
    assert ev(f"{a} - {b} - {c}") == a - b - c
    assert math.isclose(ev(f"{a} / {b} / {c}"), a / b / c)
