"""Enumerate U-Net parameter tensors from the block list and print the totals.

Each level has two 3^3 convolutions; each decoder level upsamples, applies a
3^3 convolution, concatenates the skip, then two more 3^3 convolutions; heads
are 1^3 convolutions on the m finest decoder levels. Batch normalization adds
a scale and a shift per convolution output channel, heads excluded.
"""
import sys


def count(depth, base, m, cin=1, cout=1, batch_norm=False):
    ch = [base * 2**l for l in range(depth)]
    convs = []
    prev = cin
    for l in range(depth):
        convs += [(prev, ch[l], 3), (ch[l], ch[l], 3)]
        prev = ch[l]
    for l in reversed(range(depth - 1)):
        convs += [(ch[l + 1], ch[l], 3), (2 * ch[l], ch[l], 3), (ch[l], ch[l], 3)]
    total = sum(o * i * k**3 + o for i, o, k in convs)
    tensors = 2 * len(convs)
    if batch_norm:
        total += sum(2 * o for _, o, _ in convs)
        tensors += 2 * len(convs)
    for s in range(m):
        total += cout * ch[s] + cout
        tensors += 2
    return total, tensors


if __name__ == "__main__":
    for args in [(4, 16, 3), (4, 8, 3), (2, 4, 1), (3, 8, 2)]:
        print(args, count(*args), "bn:", count(*args, batch_norm=True))
    sys.exit(0)
