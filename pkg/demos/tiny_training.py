"""Train a small hybrid network on a few synthetic rooms and read the report."""

import dataclasses

from meepo.config import format_config
from meepo.model import ModelConfig
from meepo.train import DatasetSpec, TrainConfig, train_loop

data = DatasetSpec(grid_size=0.2, num_train=4, num_val=2)
model = ModelConfig(grid_size=data.grid_size)
train = TrainConfig(steps=60, eval_every=20)

print(format_config(model, train))
result = train_loop(model, train, data)
for rep in result.reports:
    print(rep.summary())

# Same budget without the Mamba mixer, for comparison.
conv_only = dataclasses.replace(model, block_types=("cnn_only",))
print("cnn_only:", train_loop(conv_only, train, data).final.summary())
