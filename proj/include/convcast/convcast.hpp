#ifndef CONVCAST_CONVCAST_HPP
#define CONVCAST_CONVCAST_HPP

#include "convcast/backend.hpp"
#include "convcast/cache.hpp"
#include "convcast/corpus.hpp"
#include "convcast/error.hpp"
#include "convcast/http_backend.hpp"
#include "convcast/log.hpp"
#include "convcast/metrics.hpp"
#include "convcast/parsing.hpp"
#include "convcast/pipeline.hpp"
#include "convcast/prompting.hpp"
#include "convcast/records.hpp"
#include "convcast/report.hpp"
#include "convcast/scaling.hpp"
#include "convcast/seeding.hpp"
#include "convcast/text.hpp"
#include "convcast/topics.hpp"

#endif  // CONVCAST_CONVCAST_HPP
