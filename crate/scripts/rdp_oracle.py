#!/usr/bin/env python3
"""Direct high-precision summation of the subsampled-Gaussian Renyi bound.

Writes the golden table consumed by crates/core/tests/accountant_oracle.rs.
The Rust accountant works in log space; this script sums the binomial
expansion directly with 60-digit decimals so the two routes stay independent.
"""
import sys
from mpmath import mp, mpf, binomial, exp, log

mp.dps = 60

QS = ["0.001", "0.01", "0.02", "0.05", "0.1", "0.25", "0.5"]
SIGMAS = ["0.6", "0.8", "1.0", "1.5", "2.0", "4.0"]
ORDERS = [2, 3, 4, 5, 8, 16, 32, 64]

GRID = [1.25, 1.5, 1.75] + list(range(2, 65)) + [96, 128, 256]


def rdp_int(q, sigma, alpha):
    q = mpf(q)
    sigma = mpf(sigma)
    total = mpf(0)
    for j in range(alpha + 1):
        total += binomial(alpha, j) * (1 - q) ** (alpha - j) * q ** j * exp(mpf(j * (j - 1)) / (2 * sigma ** 2))
    return log(total) / (alpha - 1)


def rdp(q, sigma, alpha):
    if mpf(q) == 1:
        return mpf(alpha) / (2 * mpf(sigma) ** 2)
    if float(alpha) == int(alpha):
        return rdp_int(q, sigma, int(alpha))
    lo, hi = int(alpha), int(alpha) + 1
    vals = [rdp_int(q, sigma, hi)]
    if lo >= 2:
        vals.append(rdp_int(q, sigma, lo))
    return max(vals)


def epsilon(q, sigma, steps, delta):
    best = None
    for a in GRID:
        v = steps * rdp(q, sigma, a) + log(1 / mpf(delta)) / (mpf(a) - 1)
        best = v if best is None or v < best else best
    return best


def main():
    out = sys.argv[1]
    with open(out, "w") as f:
        f.write("q,sigma,alpha,rdp\n")
        for q in QS:
            for s in SIGMAS:
                for a in ORDERS:
                    f.write(f"{q},{s},{a},{mp.nstr(rdp_int(q, s, a), 20)}\n")
    print("eps(q=0.01,sigma=1,T=1000,delta=1e-5) =", mp.nstr(epsilon("0.01", "1.0", 1000, "1e-5"), 15))


if __name__ == "__main__":
    main()
