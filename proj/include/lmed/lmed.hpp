#pragma once

#include "lmed/error.hpp"
#include "lmed/rng.hpp"
#include "lmed/parallel.hpp"
#include "lmed/schema.hpp"
#include "lmed/pooled.hpp"
#include "lmed/learners.hpp"
#include "lmed/nuisance.hpp"
#include "lmed/eif.hpp"
#include "lmed/oracle.hpp"
#include "lmed/simulate.hpp"
