#pragma once

#include "msf/ablate.hpp"
#include "msf/augment.hpp"
#include "msf/bench.hpp"
#include "msf/checkpoint.hpp"
#include "msf/common.hpp"
#include "msf/config.hpp"
#include "msf/dataset.hpp"
#include "msf/eval.hpp"
#include "msf/flops.hpp"
#include "msf/grad_check.hpp"
#include "msf/labels.hpp"
#include "msf/loss.hpp"
#include "msf/metrics.hpp"
#include "msf/model.hpp"
#include "msf/ops.hpp"
#include "msf/optim.hpp"
#include "msf/report.hpp"
#include "msf/t4.hpp"
#include "msf/tape.hpp"
#include "msf/tensor.hpp"
#include "msf/train.hpp"
