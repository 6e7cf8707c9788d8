// placeholder — implemented in a later commit of this change series
