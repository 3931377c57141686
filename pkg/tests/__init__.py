# Test suite for the ULM aberration workbench
