"""Attention pooling as a superset of max and mean pooling, on one pillar."""

import numpy as np

from pvt import tensor as T
from pvt.nn import weighted_aggregate

rng = np.random.default_rng(0)
values = rng.normal(size=(1, 6, 1))      # one voxel, six points, one channel
mask = np.ones((1, 6, 1))

# one-hot weight on the arg-max point reproduces max pooling
onehot = np.zeros((1, 1, 6))
onehot[0, 0, values[0, :, 0].argmax()] = 1.0
picked = weighted_aggregate(onehot, values).data
mx, _ = T.masked_max(values, mask, axis=1)
print("one-hot  :", picked.ravel(), " max :", mx.data.ravel())

# uniform weights reproduce mean pooling
uniform = np.full((1, 1, 6), 1 / 6)
print("uniform  :", weighted_aggregate(uniform, values).data.ravel(),
      " mean:", T.masked_mean(values, mask, axis=1).data.ravel())

# anything in between is a learned blend; a softmax over scores gives one
scores = np.array([[[2.0, 0.0, 0.0, 1.0, 0.0, -1.0]]])
soft = np.exp(scores) / np.exp(scores).sum(-1, keepdims=True)
print("softmax  :", weighted_aggregate(soft, values).data.ravel(), " weights:", soft.round(3).ravel())
