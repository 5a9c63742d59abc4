#pragma once

#include "common.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "model.hpp"
#include "impact.hpp"
#include "nag.hpp"
#include "similarity.hpp"
#include "selection.hpp"
#include "analysis.hpp"
#include "corpus.hpp"
#include "synthetic.hpp"
