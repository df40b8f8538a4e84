# Adapter parameter budgets: closed form vs enumerating a real bank.
#
# One bottleneck adapter on a stage of width d costs 2*r*d + r^2
# weights (plus 2*r + d biases). Two injection positions per block,
# times a density-dependent route multiplier, times the blocks of the
# active stages. With the b2-like backbone (dims 64/128/320/512, depths
# 3/4/6/3) and r=8, the bias-inclusive totals land exactly on the
# published budget deltas: +0.14M (2 modalities), +0.43M (3), +0.71M
# (4 modalities, fusing only the two coarsest stages).

from adafuse.budget import budget_report

for m, stages in ((2, (1, 2, 3, 4)), (3, (1, 2, 3, 4)), (4, (3, 4))):
    record, table = budget_report("b2-like", m, "pair-bi", stages, bottleneck=8)
    print(table)
    print()

# The same tool covers the other densities; shared banks divide the
# pair-bidirectional total by C(M,2), unidirectional pairs double it.
for density in ("shared", "pair-bi", "pair-uni"):
    record, _ = budget_report("b2-like", 4, density, (1, 2, 3, 4), bottleneck=8)
    print(f"m=4 all stages, {density:<9}: {record['analytic_with_biases']:>12,} "
          f"params (enumerated match: {record['match']})")
