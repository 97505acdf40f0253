"""Uniform sparse networks: degree-uniform sparse layers built and trained from scratch."""

from usn.modelspace import (
    LogCount,
    SpaceParams,
    enumerate_usn_exact,
    expected_variation,
    log10_binomial,
    sparse_space,
    usn_space,
)
from usn.topology import (
    DegreeSpec,
    SparsityPattern,
    degree_spec,
    deserialize_pattern,
    generate_random,
    generate_uniform,
    pattern_distance,
    serialize_pattern,
)

__version__ = "0.1.0"
