"""The lock-id mixer shared by routing and table indexing.

splitmix64 finaliser: add the golden-ratio increment, then three
xor-shift / multiply rounds. It is a bijection on 64-bit words, so every
route can be inverted when a test needs a colliding id.
"""

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)
