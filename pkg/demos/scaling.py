"""Time neighbour search for KNN and for the graph walk as the table grows.

    python3 demos/scaling.py [outdir]

Writes bench.json, bench.txt and bench.csv when an output directory is given.
"""
import sys

from llmforest.evalbench import bench_neighbor_search

report = bench_neighbor_search([1000, 2000, 3000, 4000, 5000], d=22, q=5, repetitions=3, seed=0)
print(report.to_text())
if len(sys.argv) > 1:
    report.write(sys.argv[1])
