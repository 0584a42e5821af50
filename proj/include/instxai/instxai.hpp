#pragma once

#include "instxai/autodiff.hpp"
#include "instxai/experiments.hpp"
#include "instxai/graph.hpp"
#include "instxai/instances.hpp"
#include "instxai/kernels.hpp"
#include "instxai/keyvalue.hpp"
#include "instxai/phantom.hpp"
#include "instxai/report.hpp"
#include "instxai/saliency.hpp"
#include "instxai/segmodel.hpp"
#include "instxai/stats.hpp"
#include "instxai/tensor.hpp"
#include "instxai/volume.hpp"
