"""Reference architectures used by the fixtures, the CLI and the benchmarks."""
from .graph import spec_parse

TINY_CNN = """
conv out=8 k=3
bn
relu
conv out=16 k=3
bn
relu
gap
linear out=10
"""

# parameters: conv 3*8*9 + bn 2*8 + conv 8*16*9 + bn 2*16 + linear 16*10 + 10
TINY_CNN_PARAMS = 216 + 16 + 1152 + 32 + 170

TINY_RESNET = """
stem: conv out=8 k=3
bn
skip: relu
conv out=8 k=3
bn
relu
conv out=8 k=3
tail: bn
add skip tail
relu
conv out=16 k=3 stride=2
bn
relu
gap
linear out=10
"""

PRESETS = {"tiny-cnn": TINY_CNN, "tiny-resnet": TINY_RESNET}
DEFAULT_INPUT = (3, 8, 8)


def build(name, input_shape=DEFAULT_INPUT, seed=0):
    return spec_parse(PRESETS[name], input_shape, seed=seed)
