"""Schema-driven surrogate public data and DP auxiliary-task benchmarks."""

from .baselines import (ArbitraryGenerator, BayesNet, GenSpec, UniformGenerator, UnivariateGenerator,
                        build_random_bn, gen_arbitrary, gen_uniform, gen_univariate, sample_bn)
from .schema import Dataset, Schema, VariableSpec, load_schema, parse_schema, split_dataset, validate_record

__version__ = "0.1.0"

__all__ = [
    "ArbitraryGenerator", "BayesNet", "Dataset", "GenSpec", "Schema", "UniformGenerator", "UnivariateGenerator",
    "VariableSpec", "build_random_bn", "gen_arbitrary", "gen_uniform", "gen_univariate", "load_schema",
    "parse_schema", "sample_bn", "split_dataset", "validate_record",
]
