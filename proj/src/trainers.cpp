#include "cyto/common.hpp"
