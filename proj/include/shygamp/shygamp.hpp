#pragma once

#include "shygamp/errors.hpp"
#include "shygamp/gamp.hpp"
#include "shygamp/gm_cache.hpp"
#include "shygamp/input_denoisers.hpp"
#include "shygamp/io.hpp"
#include "shygamp/model.hpp"
#include "shygamp/output_denoisers.hpp"
#include "shygamp/report.hpp"
#include "shygamp/synth.hpp"
#include "shygamp/trainer.hpp"
