"""Independent oracles shared by the test modules."""

import itertools
import string

import numpy as np


def contract_oracle(a, b, sigma_counts):
    """Reference contraction via einsum letters, lowest occurrences matched."""
    letters = iter(string.ascii_letters)
    la = [next(letters) for _ in range(a.order)]
    lb = [next(letters) for _ in range(b.order)]
    for var, m in sigma_counts.items():
        pa = [i for i, v in enumerate(a.variables) if v == var][:m]
        pb = [i for i, v in enumerate(b.variables) if v == var][:m]
        for i, j in zip(pa, pb):
            lb[j] = la[i]
    shared = set(la) & set(lb)
    out = [c for c in la if c not in shared] + [c for c in lb if c not in shared]
    return np.einsum(f"{''.join(la)},{''.join(lb)}->{''.join(out)}", a.values, b.values)


def all_assignments(variables):
    return itertools.product(*[range(v.cardinality) for v in variables])
