"""Attention cost of one long concatenated sequence versus m separate snippets.

Run: python demos/02_attention_cost.py
"""

from snipattn import profile

# concatenating m snippets of L tokens gives one sequence of m*L tokens, and
# self-attention touches (m*L)^2 pairs; encoding them apart touches m*L^2
L = 32
print(" m   concat mults   snippet mults   ratio")
for m in (1, 2, 4, 8, 16):
    r = profile(m, L)
    print("%2d %14d %15d %7.2f" % (m, r["measured_concat"], r["measured_snippet"], r["measured_ratio"]))

# the counts come from the attention kernels while they actually run, so the
# ratio grows linearly in m; the analytic model predicts the same numbers
r = profile(8, L)
print("analytic", r["analytic_concat"], r["analytic_snippet"], "measured", r["measured_concat"], r["measured_snippet"])
