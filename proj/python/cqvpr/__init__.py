"""CQVPR: contextual-query visual place recognition.

C++ core exposed through pybind11: tensor ops, mutual-nearest-neighbor
matching, exact retrieval, model extraction and the gradient suite.
"""

from cqvpr._core import (  # noqa: F401
    DescriptorIndex,
    MatchPair,
    MatchSet,
    Model,
    RankedEntry,
    RankedList,
    __version__,
    gem_pool,
    generate_synthetic_dataset,
    l2_normalize,
    layer_norm,
    match_grids,
    matmul,
    mnn_match,
    run_gradient_suite,
    softmax,
    transposed_conv2d_output_size,
)
