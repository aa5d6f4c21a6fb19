"""Sea-land segmentation: a residual encoder-decoder network trained and
run entirely on a small numpy-backed autodiff engine."""

__version__ = "0.1.0"
