"""Pinned reference fixtures: two published 11-task accuracy matrices and
their summary metrics, used to validate the metric implementations.

Each RAW matrix is row i = accuracy of every task's test set evaluated on
the checkpoint produced after training task i (percent). Column order
matches TASK_NAMES. The summary rows are the published per-task
Transfer/Average/Last values with their means; computed metrics must
reproduce them within 0.1 (the source tables carry one decimal and a few
entries are rounded inconsistently, e.g. a column of 59.5s summarized as
59.4, so exact equality is not attainable by construction).
"""

TASK_NAMES = [
    "Aircraft", "Caltech101", "CIFAR100", "DTD", "EuroSAT", "Flowers",
    "Food", "MNIST", "OxfordPet", "Cars", "SUN397",
]

# Variant "MA": usage-counter routing without the merge step.
MA_RAW = [
    [51.3, 88.4, 68.2, 44.7, 55.3, 71.0, 88.5, 59.5, 89.0, 64.7, 65.2],
    [51.1, 94.6, 68.2, 35.2, 55.3, 69.7, 88.5, 59.5, 89.0, 64.7, 62.7],
    [49.3, 92.9, 87.5, 38.5, 55.3, 68.3, 88.5, 59.5, 89.0, 64.7, 63.6],
    [49.1, 93.3, 87.2, 79.9, 55.3, 63.2, 88.5, 59.5, 89.0, 64.7, 64.1],
    [49.1, 93.3, 87.3, 80.2, 95.5, 63.4, 88.5, 59.5, 89.0, 64.7, 64.1],
    [49.4, 94.1, 87.2, 79.6, 96.4, 97.5, 88.4, 59.5, 89.0, 64.7, 64.2],
    [49.5, 93.8, 87.3, 78.9, 95.6, 96.9, 89.1, 59.5, 89.0, 64.7, 64.3],
    [49.6, 93.5, 87.1, 77.5, 95.8, 95.8, 89.1, 98.4, 89.0, 64.7, 64.3],
    [49.1, 93.4, 86.8, 78.0, 95.0, 94.6, 89.0, 98.2, 89.2, 64.7, 64.2],
    [48.6, 93.0, 86.8, 77.8, 94.0, 94.2, 89.0, 98.3, 89.2, 85.9, 64.3],
    [49.0, 93.3, 86.6, 77.1, 93.1, 94.5, 89.1, 98.0, 89.2, 85.6, 79.9],
]

# Variant "Merged": the full method with expert merging enabled.
MERGED_RAW = [
    [52.3, 88.4, 68.2, 44.7, 55.3, 71.0, 88.5, 59.5, 89.0, 64.7, 65.2],
    [51.3, 94.0, 68.2, 35.7, 55.3, 68.4, 88.5, 59.5, 89.0, 64.7, 63.5],
    [51.0, 93.5, 87.3, 38.8, 55.3, 67.3, 88.5, 59.5, 89.0, 64.7, 63.9],
    [50.6, 94.1, 87.2, 80.0, 55.3, 67.3, 88.5, 59.5, 89.0, 64.7, 64.4],
    [51.0, 94.0, 87.3, 79.8, 94.8, 67.5, 88.5, 59.5, 89.0, 64.7, 64.5],
    [51.1, 94.3, 87.2, 80.1, 95.2, 97.7, 88.3, 59.5, 89.0, 64.7, 64.6],
    [50.7, 94.1, 87.1, 78.6, 94.3, 97.0, 89.1, 59.5, 89.0, 64.7, 64.8],
    [51.3, 93.4, 87.0, 78.5, 94.8, 96.3, 89.0, 98.7, 89.0, 64.7, 64.8],
    [51.2, 93.1, 86.8, 78.5, 94.9, 95.4, 89.0, 98.5, 89.2, 64.7, 64.8],
    [50.8, 93.5, 86.8, 78.1, 94.5, 94.4, 89.0, 98.6, 89.2, 85.5, 64.8],
    [50.7, 92.7, 86.5, 77.0, 92.6, 94.1, 89.0, 98.5, 89.2, 85.5, 79.8],
]

# Published per-task summaries (None where the metric is undefined).
REFERENCE_METRICS = {
    "MA": {
        "transfer": [None, 88.4, 68.2, 39.4, 55.3, 67.1, 88.5, 59.4, 89.0, 64.7, 64.1],
        "transfer_mean": 68.4,
        "average": [49.6, 93.1, 83.7, 67.9, 80.6, 82.6, 88.7, 73.6, 89.1, 68.5, 65.5],
        "average_mean": 76.6,
        "last": [49.0, 93.3, 86.6, 77.1, 93.1, 94.5, 89.1, 98.0, 89.2, 85.6, 79.9],
        "last_mean": 85.0,
    },
    "Merged": {
        "transfer": [None, 88.4, 68.2, 39.7, 55.3, 68.3, 88.5, 59.4, 89.0, 64.7, 64.5],
        "transfer_mean": 68.6,
        "average": [51.1, 93.2, 83.6, 68.2, 80.2, 83.3, 88.7, 73.7, 89.1, 68.5, 65.9],
        "average_mean": 76.9,
        "last": [50.7, 92.7, 86.5, 77.0, 92.6, 94.1, 89.0, 98.5, 89.2, 85.5, 79.8],
        "last_mean": 85.0,
    },
}

FIXTURES = {
    "MA": (MA_RAW, REFERENCE_METRICS["MA"]),
    "Merged": (MERGED_RAW, REFERENCE_METRICS["Merged"]),
}
