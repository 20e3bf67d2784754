// Copyright 2026 The KOTG Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "kotg/app.hpp"
#include "kotg/checkpoint.hpp"
#include "kotg/corpus.hpp"
#include "kotg/decode.hpp"
#include "kotg/errors.hpp"
#include "kotg/eval.hpp"
#include "kotg/gate.hpp"
#include "kotg/keying.hpp"
#include "kotg/matrix.hpp"
#include "kotg/model.hpp"
#include "kotg/service.hpp"
#include "kotg/sha256.hpp"
#include "kotg/stream.hpp"
#include "kotg/tokenizer.hpp"
#include "kotg/train.hpp"
#include "kotg/transform.hpp"
