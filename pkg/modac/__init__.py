# -*- coding: utf-8 -*-
# MODAC: meta-gradient option discovery
