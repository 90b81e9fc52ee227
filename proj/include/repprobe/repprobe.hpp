#pragma once

#include "repprobe/cluster.hpp"
#include "repprobe/corpus.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/infometrics.hpp"
#include "repprobe/probe.hpp"
#include "repprobe/sweep.hpp"
#include "repprobe/viz.hpp"
