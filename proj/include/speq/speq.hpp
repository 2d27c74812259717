#pragma once

#include "speq/bsfp.hpp"
#include "speq/container.hpp"
#include "speq/errors.hpp"
#include "speq/fp16.hpp"
#include "speq/kernels.hpp"
#include "speq/matrix.hpp"
#include "speq/model_io.hpp"
#include "speq/npy.hpp"
#include "speq/pe_model.hpp"
#include "speq/quantizer.hpp"
#include "speq/report.hpp"
#include "speq/specdec.hpp"
#include "speq/toy_lm.hpp"
