"""Kernel dispatch: numba-compiled by default, pure numpy via MEMLAB_BACKEND=numpy."""

from .. import backend

if backend.ACTIVE == "numba":
    from . import numba_impl as _impl
else:
    from . import numpy_impl as _impl

pairwise_sq_dists = _impl.pairwise_sq_dists
knn_predict_batch = _impl.knn_predict_batch
idp_forward_batch = _impl.idp_forward_batch
idp_backward_batch = _impl.idp_backward_batch
adam_update = _impl.adam_update
train_linear_idp_chunk = _impl.train_linear_idp_chunk
