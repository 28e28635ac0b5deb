#pragma once

#include "aim/common.hpp"
#include "aim/tensor.hpp"
#include "aim/gradcheck.hpp"
#include "aim/params.hpp"
#include "aim/vit.hpp"
#include "aim/adapter.hpp"
#include "aim/model.hpp"
#include "aim/checkpoint.hpp"
#include "aim/optim.hpp"
#include "aim/tasks.hpp"
#include "aim/train.hpp"
#include "aim/presets.hpp"
