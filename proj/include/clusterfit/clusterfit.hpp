#pragma once

#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/kmeans.hpp"
#include "clusterfit/relabel.hpp"
#include "clusterfit/nnet.hpp"
#include "clusterfit/probe.hpp"
#include "clusterfit/synth.hpp"
#include "clusterfit/config.hpp"
#include "clusterfit/harness.hpp"
