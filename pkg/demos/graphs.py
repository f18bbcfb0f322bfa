"""The two station graphs on a toy layout.

Five stations: three clustered within a few km, two far away. Three share
an evening demand peak, two peak at midday. The geographic graph follows
distance; the demand graph follows the DTW similarity of the load curves.

    python demos/graphs.py
"""

import numpy as np

from twgcn.graph import (
    DtwConfig,
    build_dem_adjacency,
    build_geo_adjacency,
    dtw_distance,
    normalize_adjacency,
    pairwise_haversine_km,
)

coords = np.array([[36.16, -86.78], [36.18, -86.75], [36.14, -86.80], [35.96, -83.92], [35.15, -90.05]])
hours = np.arange(48)
evening = 5 + 3 * np.cos(2 * np.pi * (hours - 19) / 24)
midday = 5 + 3 * np.cos(2 * np.pi * (hours - 13) / 24)
series = np.stack([evening, evening + 0.2, midday, evening - 0.1, midday + 0.3])

np.set_printoptions(precision=3, suppress=True)
print("distances (km):\n", pairwise_haversine_km(coords))
geo = build_geo_adjacency(coords, tau_km=25.0)
print("\ngeographic adjacency (tau = 25 km):\n", geo.values)

print("\nDTW(evening, midday) =", round(dtw_distance(evening, midday), 3))
dem, gamma = build_dem_adjacency(series, DtwConfig(gamma="auto"))
print(f"demand adjacency (gamma = median DTW = {gamma:.3f}):\n", dem.values)

print("\nnormalised demand adjacency:\n", normalize_adjacency(dem).values)
