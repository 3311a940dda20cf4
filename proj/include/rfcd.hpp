/*
   Copyright 2026 The rfcd Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

// Umbrella header. The CLI layer (rfcd/cli.hpp) is not included here
// because it pulls in CLI11 and nlohmann/json.

#include "rfcd/activation.hpp"
#include "rfcd/cd_operators.hpp"
#include "rfcd/config.hpp"
#include "rfcd/errors.hpp"
#include "rfcd/features.hpp"
#include "rfcd/flow.hpp"
#include "rfcd/forward.hpp"
#include "rfcd/io.hpp"
#include "rfcd/linalg.hpp"
#include "rfcd/moments.hpp"
#include "rfcd/oracle.hpp"
#include "rfcd/parallel.hpp"
#include "rfcd/random.hpp"
#include "rfcd/spectral.hpp"
#include "rfcd/teacher.hpp"
#include "rfcd/version.hpp"
