#pragma once

#include "define/analysis.hpp"
#include "define/config.hpp"
#include "define/corpus.hpp"
#include "define/embedder.hpp"
#include "define/lm.hpp"
#include "define/rng.hpp"
#include "define/tensor.hpp"
#include "define/transforms.hpp"
