"""Functor chains: grammar, dimension checking, evaluation against a fold oracle."""

import math
import random

import numpy as np
import pytest

from insitu.fields import field_vector
from insitu.functors import (
    ChainError,
    ChainLimits,
    FunctorDescriptor,
    default_registry,
    eval_chain,
    eval_chain_array,
    identity_chain,
    parse_chain,
    reduce_to_scalar,
)


@pytest.fixture()
def registry():
    return default_registry()


# Step-by-step scalar fold oracle, independent of the vectorized pipeline.

def oracle_step(name, arg, values):
    if name == "add":
        return tuple(v + a for v, a in zip(values, arg))
    if name == "mul":
        return tuple(v * a for v, a in zip(values, arg))
    if name == "length":
        return (math.sqrt(sum(v * v for v in values)),)
    if name == "sum":
        total = values[0]
        for v in values[1:]:
            total = total + v
        return (total,)
    if name == "pow":
        # Componentwise exponentiation via the elementary ufunc on single
        # elements: libm variants differ in the last ulp, so "exact" is only
        # meaningful against the platform primitive itself.
        with np.errstate(invalid="ignore"):
            return tuple(
                float(np.power(np.asarray([v]), np.asarray([a]))[0])
                for v, a in zip(values, arg)
            )
    raise AssertionError(name)


def oracle_eval(chain, values):
    for step in chain.steps:
        values = oracle_step(step.functor.descriptor.name, step.argument, values)
    return values


class TestParse:
    def test_worked_three_step_chain(self, registry):
        chain = parse_chain("mul(2,3,4) | add(1) | length", registry, input_dim=3)
        assert len(chain.steps) == 3
        assert chain.output_dim == 1
        # Scalar constant broadcasts to the running dimension.
        assert chain.steps[1].argument == (1.0, 1.0, 1.0)

    def test_empty_text_is_identity(self, registry):
        chain = parse_chain("", registry, input_dim=3)
        assert chain.steps == ()
        assert chain.output_dim == 3

    def test_component_select_chain(self, registry):
        chain = parse_chain("mul(0,1,0) | sum", registry, input_dim=3)
        assert len(chain.steps) == 2
        assert chain.output_dim == 1

    def test_whitespace_insignificant(self, registry):
        a = parse_chain("mul( 2 , 3 ,4)|add(1)  |length", registry, input_dim=3)
        b = parse_chain("mul(2,3,4) | add(1) | length", registry, input_dim=3)
        assert [s.argument for s in a.steps] == [s.argument for s in b.steps]

    def test_unknown_functor(self, registry):
        with pytest.raises(ChainError, match="unknown functor"):
            parse_chain("foo", registry, input_dim=1)

    def test_too_many_steps(self, registry):
        limits = ChainLimits(max_length=2)
        with pytest.raises(ChainError, match="limit"):
            parse_chain("add(1)|add(1)|add(1)", registry, limits, input_dim=1)

    def test_bad_argument_count(self, registry):
        with pytest.raises(ChainError):
            parse_chain("add(1,2)", registry, input_dim=3)
        with pytest.raises(ChainError):
            parse_chain("add", registry, input_dim=3)
        with pytest.raises(ChainError):
            parse_chain("length(2)", registry, input_dim=3)

    def test_dim_composition_tracked(self, registry):
        chain = parse_chain("length | add(3) | mul(2)", registry, input_dim=4)
        assert [s.input_dim for s in chain.steps] == [4, 1, 1]
        assert chain.output_dim == 1


class TestEval:
    def test_worked_chain_matches_hand_fold(self, registry):
        # (1,1,1) -> mul(2,3,4) -> (2,3,4) -> add(1) -> (3,4,5) -> length.
        chain = parse_chain("mul(2,3,4) | add(1) | length", registry, input_dim=3)
        expected = oracle_eval(chain, (1.0, 1.0, 1.0))
        assert expected == (math.sqrt(50.0),)
        got = eval_chain(chain, field_vector(1, 1, 1))
        assert got.components == expected

    def test_identity_chain_is_fixpoint(self, registry):
        chain = identity_chain(3)
        assert eval_chain(chain, field_vector(7, 9, 2)).components == (7.0, 9.0, 2.0)

    def test_second_component_selection(self, registry):
        chain = parse_chain("mul(0,1,0) | sum", registry, input_dim=3)
        assert oracle_eval(chain, (7.0, 9.0, 2.0)) == (9.0,)
        assert eval_chain(chain, field_vector(7, 9, 2)).components == (9.0,)

    def test_pow_negative_base_yields_nan(self, registry):
        chain = parse_chain("pow(0.5)", registry, input_dim=1)
        out = eval_chain(chain, field_vector(-2.0))
        assert math.isnan(out.components[0])

    def test_dim_mismatch_rejected(self, registry):
        chain = parse_chain("length", registry, input_dim=3)
        with pytest.raises(ChainError):
            eval_chain(chain, field_vector(1.0))

    def test_randomized_chains_match_fold_oracle(self, registry):
        rng = random.Random(20160917)
        takes_arg = {"add": True, "mul": True, "pow": True, "length": False, "sum": False}
        for _ in range(300):
            dim = rng.randint(1, 4)
            length = rng.randint(0, 5)
            parts = []
            cur = dim
            for _ in range(length):
                name = rng.choice(list(takes_arg))
                if takes_arg[name]:
                    n_args = rng.choice([1, cur])
                    args = [round(rng.uniform(-2, 2), 3) for _ in range(n_args)]
                    parts.append(f"{name}({','.join(str(a) for a in args)})")
                else:
                    parts.append(name)
                    cur = 1
            text = " | ".join(parts)
            chain = parse_chain(text, registry, input_dim=dim)
            value = tuple(round(rng.uniform(-10, 10), 3) for _ in range(dim))
            expected = oracle_eval(chain, value)
            got = eval_chain(chain, field_vector(*value)).components
            assert len(got) == chain.output_dim
            for g, e in zip(got, expected):
                assert g == e or (math.isnan(g) and math.isnan(e)), (text, value)

    def test_batch_eval_matches_scalar(self, registry):
        chain = parse_chain("mul(2) | add(0.5,1.5,-1) | length", registry, input_dim=3)
        rng = np.random.default_rng(5)
        values = rng.uniform(-5, 5, (40, 3))
        batch = eval_chain_array(chain, values)
        for row, out in zip(values, batch):
            assert eval_chain(chain, field_vector(*row)).components == tuple(out)


class TestReduce:
    def test_first_component_default(self):
        assert reduce_to_scalar(field_vector(3, 4)) == 3.0
        assert reduce_to_scalar(field_vector(0, 9, 9, 9)) == 0.0

    def test_scalar_passthrough(self):
        assert reduce_to_scalar(field_vector(5)) == 5.0


class TestRegistryExtension:
    def test_register_sqrt_then_parse(self, registry):
        registry.register_functor(
            FunctorDescriptor("sqrt", False, lambda d: d),
            {d: (lambda v, c: np.sqrt(v)) for d in range(1, 5)},
        )
        chain = parse_chain("sqrt", registry, input_dim=1)
        assert eval_chain(chain, field_vector(9.0)).components == (3.0,)

    def test_duplicate_name_rejected(self, registry):
        with pytest.raises(ChainError, match="already registered"):
            registry.register_functor(
                FunctorDescriptor("add", True, lambda d: d),
                {d: (lambda v, c: v) for d in range(1, 5)},
            )

    def test_missing_dim_variant_rejected(self, registry):
        with pytest.raises(ChainError, match="missing evaluators"):
            registry.register_functor(
                FunctorDescriptor("half", False, lambda d: d),
                {1: lambda v, c: v / 2},
            )

    def test_functor_count_tracks_registrations(self):
        reg = default_registry()
        assert reg.limits.functor_count == 5
        assert reg.limits.combination_count() == 4 * 5 ** 5
        reg.register_functor(
            FunctorDescriptor("neg", False, lambda d: d),
            {d: (lambda v, c: -v) for d in range(1, 5)},
        )
        assert reg.limits.functor_count == 6
