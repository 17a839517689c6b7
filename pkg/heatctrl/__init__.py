# Heatctrl
