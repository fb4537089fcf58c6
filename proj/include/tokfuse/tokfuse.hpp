#pragma once

#include "tokfuse/bench.hpp"
#include "tokfuse/config_file.hpp"
#include "tokfuse/features.hpp"
#include "tokfuse/flops.hpp"
#include "tokfuse/fusion.hpp"
#include "tokfuse/gradcheck.hpp"
#include "tokfuse/ops.hpp"
#include "tokfuse/tape.hpp"
#include "tokfuse/tensor.hpp"
#include "tokfuse/train.hpp"
