#pragma once

#include "trace/agreement.hpp"
#include "trace/bridge.hpp"
#include "trace/common.hpp"
#include "trace/concepts.hpp"
#include "trace/corpus.hpp"
#include "trace/csv.hpp"
#include "trace/features.hpp"
#include "trace/ffnn.hpp"
#include "trace/llm_client.hpp"
#include "trace/logreg.hpp"
#include "trace/metrics.hpp"
#include "trace/model_io.hpp"
#include "trace/naive_bayes.hpp"
#include "trace/predictor.hpp"
#include "trace/search.hpp"
#include "trace/shap.hpp"
#include "trace/slalom.hpp"
#include "trace/tensor_io.hpp"
#include "trace/tokenizer.hpp"
#include "trace/validation.hpp"
