#pragma once

#include "fedqsn/codec.hpp"
#include "fedqsn/config.hpp"
#include "fedqsn/data.hpp"
#include "fedqsn/errors.hpp"
#include "fedqsn/masking.hpp"
#include "fedqsn/metrics.hpp"
#include "fedqsn/model.hpp"
#include "fedqsn/protocol.hpp"
#include "fedqsn/quantization.hpp"
#include "fedqsn/rng.hpp"
#include "fedqsn/runner.hpp"
#include "fedqsn/tensor.hpp"
