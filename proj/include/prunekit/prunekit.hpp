#pragma once

#include "prunekit/benchmark.hpp"
#include "prunekit/checkpoint.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/pipeline.hpp"
#include "prunekit/report.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/surgery.hpp"
#include "prunekit/synthetic.hpp"
#include "prunekit/tensor.hpp"
#include "prunekit/training.hpp"
#include "prunekit/transformer.hpp"
